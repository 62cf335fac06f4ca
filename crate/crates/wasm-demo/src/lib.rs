//! Browser bindings. Every export takes plain numbers in display units and
//! returns a JSON string.

use std::cell::RefCell;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use membrane_ident::identify::{assign_and_identify, IdentMode, IdentificationConfig};
use membrane_ident::peak_detect::find_peaks;
use membrane_ident::plate_model::{build_parameter_matrix, Plate, SensorDesign, StressState};
use membrane_ident::response_synth::{synthesize, AcquisitionSpec, DefectSpec, DieTruth};
use membrane_ident::surrogate::{default_z_grid, fit_inverse, InverseSurrogate};
use membrane_ident::units::{MEGAPASCAL, MICROMETRE};

#[derive(Serialize)]
struct ModeRow {
    m: u32,
    n: u32,
    frequency_hz: f64,
}

#[derive(Serialize)]
struct PeakOut {
    frequency_hz: f64,
    amplitude: f64,
}

#[derive(Serialize)]
struct Spectrum {
    freqs_hz: Vec<f64>,
    amplitude: Vec<f64>,
    peaks: Vec<PeakOut>,
}

#[derive(Serialize)]
struct Identification {
    status: &'static str,
    thickness_um: Option<f64>,
    eie_um: Option<f64>,
    mode_frequencies_hz: Vec<f64>,
    degenerate_split: Option<f64>,
    peaks: usize,
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn truth(thickness_um: f64, stress_mpa: f64, asymmetry: f64, no_membrane: bool, seed: u64) -> DieTruth {
    let d = SensorDesign::default();
    let defect = if no_membrane {
        DefectSpec::NoMembrane
    } else if asymmetry > 0.0 {
        DefectSpec::Asymmetry { ratio: asymmetry }
    } else {
        DefectSpec::None
    };
    DieTruth {
        geometry: d.geometry.with_thickness(thickness_um * MICROMETRE),
        material: d.material,
        stress: StressState::new(stress_mpa * MEGAPASCAL),
        defect,
        rng_seed: seed,
    }
}

pub fn modal_table_json(
    thickness_um: f64,
    stress_mpa: f64,
    side_a_um: f64,
    side_b_um: f64,
    count: usize,
) -> Result<String, String> {
    let d = SensorDesign::default();
    let mut g = d.geometry.with_thickness(thickness_um * MICROMETRE);
    g.side_a = side_a_um * MICROMETRE;
    g.side_b = side_b_um * MICROMETRE;
    let plate = Plate::new(g, d.material, StressState::new(stress_mpa * MEGAPASCAL)).map_err(|e| e.to_string())?;
    let rows: Vec<ModeRow> = plate
        .modes(count)
        .into_iter()
        .map(|(mode, f)| ModeRow {
            m: mode.m,
            n: mode.n,
            frequency_hz: f,
        })
        .collect();
    to_json(&rows)
}

pub fn simulate_json(
    thickness_um: f64,
    stress_mpa: f64,
    asymmetry: f64,
    no_membrane: bool,
    seed: u64,
) -> Result<String, String> {
    let t = truth(thickness_um, stress_mpa, asymmetry, no_membrane, seed);
    let resp = synthesize(&t, &AcquisitionSpec::default()).map_err(|e| e.to_string())?;
    let peaks = find_peaks(&resp, 5.0, 1e3)
        .into_iter()
        .map(|p| PeakOut {
            frequency_hz: p.frequency,
            amplitude: p.amplitude,
        })
        .collect();
    to_json(&Spectrum {
        amplitude: resp.combined(),
        freqs_hz: resp.freqs,
        peaks,
    })
}

thread_local! {
    static SURROGATE: RefCell<Option<(f64, InverseSurrogate)>> = const { RefCell::new(None) };
}

/// Thickness-only surrogate at `stress` (Pa), fitted once per stress value.
fn with_surrogate<R>(stress: f64, f: impl FnOnce(&InverseSurrogate) -> R) -> Result<R, String> {
    SURROGATE.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.as_ref().is_none_or(|(s, _)| *s != stress) {
            let pm = build_parameter_matrix(&SensorDesign::default(), &default_z_grid(), &[stress], 3)
                .map_err(|e| e.to_string())?;
            let fit = fit_inverse(&pm, 1e-3, 6).map_err(|e| e.to_string())?;
            *slot = Some((stress, fit.surrogate));
        }
        Ok(f(&slot.as_ref().unwrap().1))
    })
}

pub fn identify_json(
    thickness_um: f64,
    stress_mpa: f64,
    asymmetry: f64,
    no_membrane: bool,
    seed: u64,
) -> Result<String, String> {
    let t = truth(thickness_um, stress_mpa, asymmetry, no_membrane, seed);
    let resp = synthesize(&t, &AcquisitionSpec::default()).map_err(|e| e.to_string())?;
    let peaks = find_peaks(&resp, 5.0, 1e3);
    let r = with_surrogate(stress_mpa * MEGAPASCAL, |s| {
        let cfg = IdentificationConfig::for_surrogate(s, IdentMode::WaferTest);
        assign_and_identify(&peaks, s, &cfg)
    })?
    .map_err(|e| e.to_string())?;
    let thickness = r.mean_params.first().map(|z| z / MICROMETRE);
    to_json(&Identification {
        status: r.classification.as_str(),
        thickness_um: thickness,
        eie_um: r.eie.first().map(|e| e / MICROMETRE),
        mode_frequencies_hz: r.mode_frequencies,
        degenerate_split: r.degenerate_split,
        peaks: peaks.len(),
    })
}

/// Lowest `count` modes of a plate with the default material stack.
#[wasm_bindgen]
pub fn modal_table(
    thickness_um: f64,
    stress_mpa: f64,
    side_a_um: f64,
    side_b_um: f64,
    count: usize,
) -> Result<String, JsValue> {
    modal_table_json(thickness_um, stress_mpa, side_a_um, side_b_um, count).map_err(|e| JsValue::from_str(&e))
}

/// Synthetic spectrum (channel maximum) and detected peaks of one die.
#[wasm_bindgen]
pub fn simulate(
    thickness_um: f64,
    stress_mpa: f64,
    asymmetry: f64,
    no_membrane: bool,
    seed: u64,
) -> Result<String, JsValue> {
    simulate_json(thickness_um, stress_mpa, asymmetry, no_membrane, seed).map_err(|e| JsValue::from_str(&e))
}

/// Thickness identification and classification of the die [`simulate`] shows.
#[wasm_bindgen]
pub fn identify(
    thickness_um: f64,
    stress_mpa: f64,
    asymmetry: f64,
    no_membrane: bool,
    seed: u64,
) -> Result<String, JsValue> {
    identify_json(thickness_um, stress_mpa, asymmetry, no_membrane, seed).map_err(|e| JsValue::from_str(&e))
}
