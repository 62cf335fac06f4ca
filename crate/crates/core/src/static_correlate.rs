//! Static pressure sweeps of the piezoresistive bridge and gain adaptation
//! against dynamically identified membrane parameters.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plate_model::{PiezoModel, Plate, SensorDesign, DEFAULT_SERIES_ORDER};
use crate::response_synth::{effective_geometry, DieTruth};
use crate::units::{linspace, BAR, MICROMETRE};

/// Upper pressure the simulated probe accepts.
pub const MAX_PRESSURE: f64 = 7.0 * BAR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticSweep {
    /// Pa, ascending from 0
    pub pressures: Vec<f64>,
    /// centre deflection, m
    pub deflections: Vec<f64>,
    /// bridge output, V
    pub voltages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub fitted_gain: f64,
    pub max_rel_voltage_error: f64,
    /// V/Pa
    pub sensitivity: f64,
}

/// Sweep settings as stored in a wafer spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticConfig {
    pub enabled: bool,
    pub max_pressure_bar: f64,
    pub points: usize,
    /// relative sigma of the multiplicative measurement noise
    pub noise: f64,
    /// maximum relative voltage error a die may show after adaptation
    pub max_error: f64,
}

impl Default for StaticConfig {
    fn default() -> Self {
        StaticConfig {
            enabled: false,
            max_pressure_bar: 0.5,
            points: 11,
            noise: 0.01,
            max_error: 0.1,
        }
    }
}

impl StaticConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.max_pressure_bar * BAR;
        if !(p > 0.0 && p <= MAX_PRESSURE) {
            return Err(Error::Config(format!(
                "static: max pressure must lie in (0, {}] bar",
                MAX_PRESSURE / BAR
            )));
        }
        if self.points < 3 {
            return Err(Error::Config("static: at least 3 sweep points are required".into()));
        }
        if !(self.noise >= 0.0 && self.max_error > 0.0) {
            return Err(Error::Config("static: noise must be >= 0 and max_error > 0".into()));
        }
        Ok(())
    }

    pub fn pressures(&self) -> Vec<f64> {
        linspace(0.0, self.max_pressure_bar * BAR, self.points)
    }
}

/// Simulates a sweep on the die. With `noise = Some((sigma, seed))` both
/// channels get independent multiplicative `1 + sigma N(0, 1)` noise.
pub fn sweep(
    truth: &DieTruth,
    piezo: &PiezoModel,
    pressures: &[f64],
    noise: Option<(f64, u64)>,
) -> Result<StaticSweep> {
    if pressures.first() != Some(&0.0) {
        return Err(Error::Domain("a sweep starts at 0 Pa".into()));
    }
    if pressures.windows(2).any(|w| w[1] <= w[0]) || pressures.iter().any(|&p| p > MAX_PRESSURE) {
        return Err(Error::Domain(format!(
            "sweep pressures must ascend within [0, {} bar]",
            MAX_PRESSURE / BAR
        )));
    }
    let geom = effective_geometry(truth).ok_or_else(|| Error::Domain("die has no membrane".into()))?;
    piezo.validate(&geom)?;
    let plate = Plate::new(geom, truth.material, truth.stress)?;
    let center = geom.center();
    let unit_w = plate.deflection(1.0, center, DEFAULT_SERIES_ORDER)?.value;
    let unit_ds = plate
        .stress_difference(1.0, piezo.resistor_location, DEFAULT_SERIES_ORDER)?
        .value;
    let unit_v = piezo.gain * piezo.supply_voltage * unit_ds;

    let mut deflections: Vec<f64> = pressures.iter().map(|p| p * unit_w).collect();
    let mut voltages: Vec<f64> = pressures.iter().map(|p| p * unit_v).collect();
    if let Some((sigma, seed)) = noise {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (w, v) in deflections.iter_mut().zip(voltages.iter_mut()) {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            *w *= 1.0 + sigma * a;
            *v *= 1.0 + sigma * b;
        }
    }
    Ok(StaticSweep {
        pressures: pressures.to_vec(),
        deflections,
        voltages,
    })
}

/// Fits the bridge gain so the model at the identified `(thickness, stress)`
/// matches the measured voltages in the least-squares sense.
pub fn adapt_gain(measured: &StaticSweep, identified: (f64, f64), design: &SensorDesign) -> Result<CorrelationReport> {
    let n = measured.pressures.len();
    if n < 3 || measured.voltages.len() != n {
        return Err(Error::InsufficientData(format!(
            "gain adaptation needs >= 3 sweep points, got {n}"
        )));
    }
    if measured.voltages.iter().all(|&v| v == 0.0) {
        return Err(Error::InsufficientData("all measured voltages are zero".into()));
    }
    let plate = design.plate(identified.0, identified.1)?;
    let piezo = design.piezo;
    piezo.validate(&plate.geometry)?;
    let slope = plate
        .stress_difference(1.0, piezo.resistor_location, DEFAULT_SERIES_ORDER)?
        .value;
    // model voltage at unit gain
    let u: Vec<f64> = measured
        .pressures
        .iter()
        .map(|p| p * piezo.supply_voltage * slope)
        .collect();
    let suu: f64 = u.iter().map(|x| x * x).sum();
    if suu == 0.0 {
        return Err(Error::InsufficientData("model voltage vanishes over the sweep".into()));
    }
    let suv: f64 = u.iter().zip(&measured.voltages).map(|(a, b)| a * b).sum();
    let gain = suv / suu;
    let max_rel_voltage_error = u
        .iter()
        .zip(&measured.voltages)
        .zip(&measured.pressures)
        .filter(|&(_, &p)| p > 0.0)
        .map(|((&m, &v), _)| {
            let sim = gain * m;
            if v == 0.0 {
                if sim == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                ((sim - v) / v).abs()
            }
        })
        .fold(0.0, f64::max);
    Ok(CorrelationReport {
        fitted_gain: gain,
        max_rel_voltage_error,
        sensitivity: gain * piezo.supply_voltage * slope,
    })
}

impl StaticSweep {
    /// CSV with `pressure_bar, deflection_um, voltage_mV`, optionally
    /// prefixed by a `die_id` column.
    pub fn write_csv<W: Write>(&self, w: &mut csv::Writer<W>, die_id: Option<&str>) -> Result<()> {
        for ((p, d), v) in self.pressures.iter().zip(&self.deflections).zip(&self.voltages) {
            let mut rec = Vec::with_capacity(4);
            if let Some(id) = die_id {
                rec.push(id.to_string());
            }
            rec.push(format!("{:.6}", p / BAR));
            rec.push(format!("{:.9e}", d / MICROMETRE));
            rec.push(format!("{:.9e}", v * 1e3));
            w.write_record(&rec)?;
        }
        Ok(())
    }

    pub fn csv_header(with_die: bool) -> Vec<&'static str> {
        let mut h = Vec::new();
        if with_die {
            h.push("die_id");
        }
        h.extend(["pressure_bar", "deflection_um", "voltage_mV"]);
        h
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record(Self::csv_header(false))?;
        self.write_csv(&mut w, None)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::response_synth::DefectSpec;

    fn truth(design: &SensorDesign) -> DieTruth {
        DieTruth {
            geometry: design.geometry,
            material: design.material,
            stress: design.nominal_stress,
            defect: DefectSpec::None,
            rng_seed: 0,
        }
    }

    fn pressures() -> Vec<f64> {
        StaticConfig::default().pressures()
    }

    #[test]
    fn noiseless_sweep_is_linear_and_zero_at_zero() {
        let d = SensorDesign::default();
        let s = sweep(&truth(&d), &d.piezo, &pressures(), None).unwrap();
        assert_eq!((s.deflections[0], s.voltages[0]), (0.0, 0.0));
        let k = s.voltages[1] / s.pressures[1];
        for (p, v) in s.pressures.iter().zip(&s.voltages).skip(1) {
            assert!((v / p - k).abs() <= 1e-12 * k.abs());
        }
        assert!(s.deflections[10] > 0.0);
    }

    #[test]
    fn self_consistent_gain_is_recovered() {
        let d = SensorDesign::default();
        let t = truth(&d);
        let g0 = 2.5 * d.piezo.gain;
        let s = sweep(&t, &d.piezo.with_gain(g0), &pressures(), None).unwrap();
        let r = adapt_gain(&s, (t.geometry.thickness, t.stress.passivation_stress), &d).unwrap();
        assert!((r.fitted_gain - g0).abs() <= 1e-12 * g0.abs());
        assert!(r.max_rel_voltage_error < 1e-12);
    }

    #[test]
    fn gain_scales_with_measured_voltage() {
        let d = SensorDesign::default();
        let t = truth(&d);
        let id = (t.geometry.thickness, t.stress.passivation_stress);
        let s = sweep(&t, &d.piezo, &pressures(), Some((0.01, 4))).unwrap();
        let r1 = adapt_gain(&s, id, &d).unwrap();
        let doubled = StaticSweep {
            voltages: s.voltages.iter().map(|v| 2.0 * v).collect(),
            ..s.clone()
        };
        let r2 = adapt_gain(&doubled, id, &d).unwrap();
        assert!((r2.fitted_gain - 2.0 * r1.fitted_gain).abs() <= 1e-12 * r1.fitted_gain.abs());
    }

    #[test]
    fn wrong_thickness_and_noise_stay_under_ten_percent() {
        let d = SensorDesign::default();
        let t = truth(&d);
        let s = sweep(&t, &d.piezo, &pressures(), Some((0.01, 77))).unwrap();
        let r = adapt_gain(&s, (1.02 * t.geometry.thickness, t.stress.passivation_stress), &d).unwrap();
        assert!(r.max_rel_voltage_error < 0.1, "{r:?}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = SensorDesign::default();
        let t = truth(&d);
        assert!(sweep(&t, &d.piezo, &[1.0, 2.0], None).is_err());
        assert!(sweep(&t, &d.piezo, &[0.0, 8.0 * BAR], None).is_err());
        let no = DieTruth {
            defect: DefectSpec::NoMembrane,
            ..t
        };
        assert!(sweep(&no, &d.piezo, &pressures(), None).is_err());
        let zero = StaticSweep {
            pressures: pressures(),
            deflections: vec![0.0; 11],
            voltages: vec![0.0; 11],
        };
        assert!(adapt_gain(&zero, (15e-6, 50e6), &d).is_err());
    }
}
