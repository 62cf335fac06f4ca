//! Unit conversion at the external boundary.
//!
//! Everything inside the crate is SI. Command-line flags and file formats
//! carry explicit suffixes (`um`, `MPa`, `bar`, `kHz`, ...) and are converted
//! here.

use crate::error::{Error, Result};

pub const MICROMETRE: f64 = 1e-6;
pub const MEGAPASCAL: f64 = 1e6;
pub const GIGAPASCAL: f64 = 1e9;
pub const BAR: f64 = 1e5;
pub const KILOHERTZ: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Length,
    Pressure,
    Frequency,
}

impl Dimension {
    fn scale(self, suffix: &str) -> Option<f64> {
        let s = match (self, suffix) {
            (Dimension::Length, "m") => 1.0,
            (Dimension::Length, "mm") => 1e-3,
            (Dimension::Length, "um" | "µm" | "μm") => MICROMETRE,
            (Dimension::Length, "nm") => 1e-9,
            (Dimension::Pressure, "Pa") => 1.0,
            (Dimension::Pressure, "kPa") => 1e3,
            (Dimension::Pressure, "MPa") => MEGAPASCAL,
            (Dimension::Pressure, "GPa") => GIGAPASCAL,
            (Dimension::Pressure, "bar") => BAR,
            (Dimension::Pressure, "mbar") => 1e-3 * BAR,
            (Dimension::Frequency, "Hz") => 1.0,
            (Dimension::Frequency, "kHz") => KILOHERTZ,
            (Dimension::Frequency, "MHz") => 1e6,
            _ => return None,
        };
        Some(s)
    }
}

fn split_suffix(input: &str) -> (&str, &str) {
    let idx = input
        .find(|c: char| c.is_alphabetic() || c == 'µ' || c == 'μ')
        .unwrap_or(input.len());
    let (num, unit) = input.split_at(idx);
    (num.trim(), unit.trim())
}

fn quantity_err(input: &str, reason: impl Into<String>) -> Error {
    Error::Quantity {
        input: input.to_string(),
        reason: reason.into(),
    }
}

fn parse_number(input: &str, num: &str) -> Result<f64> {
    let v: f64 = num
        .parse()
        .map_err(|_| quantity_err(input, format!("{num:?} is not a number")))?;
    if !v.is_finite() {
        return Err(quantity_err(input, "value must be finite"));
    }
    Ok(v)
}

fn unit_scale(input: &str, unit: &str, dim: Dimension) -> Result<f64> {
    if unit.is_empty() {
        return Err(quantity_err(input, "missing unit suffix"));
    }
    dim.scale(unit)
        .ok_or_else(|| quantity_err(input, format!("unit {unit:?} is not a {dim:?} unit")))
}

/// Parses a single suffixed value such as `15um` or `0.5bar` into SI.
pub fn parse_quantity(input: &str, dim: Dimension) -> Result<f64> {
    let (num, unit) = split_suffix(input.trim());
    let scale = unit_scale(input, unit, dim)?;
    Ok(parse_number(input, num)? * scale)
}

/// Parses an inclusive range `start:stop:step<unit>` (unit on the last
/// field applies to all three) into ascending SI values.
pub fn parse_grid(input: &str, dim: Dimension) -> Result<Vec<f64>> {
    let parts: Vec<&str> = input.trim().split(':').collect();
    if parts.len() != 3 {
        return Err(quantity_err(input, "expected start:stop:step<unit>"));
    }
    let (step_num, unit) = split_suffix(parts[2]);
    let scale = unit_scale(input, unit, dim)?;
    let start = parse_number(input, parts[0])?;
    let stop = parse_number(input, parts[1])?;
    let step = parse_number(input, step_num)?;
    if step <= 0.0 {
        return Err(quantity_err(input, "step must be positive"));
    }
    if stop < start {
        return Err(quantity_err(input, "stop must not be below start"));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| (start + step * i as f64) * scale).collect())
}

/// `count` evenly spaced values from `start` to `stop` inclusive.
pub fn linspace(start: f64, stop: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count)
            .map(|i| start + (stop - start) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}
