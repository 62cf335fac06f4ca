//! Peak-to-mode assignment, parameter identification and die classification.
//!
//! Every order-preserving assignment of the surrogate's mode positions to
//! detected peaks is tried. A position whose frequency group is degenerate
//! on the nominal design may take either one peak or two adjacent peaks (a
//! split pair, evaluated at their mean). Each assignment yields one parameter
//! estimate `p_i` per frequency combination; the assignment with the smallest
//! sum of normalized spreads `EIE_N` wins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peak_detect::Peak;
use crate::surrogate::{InverseSurrogate, Parameter};
use crate::units::{MEGAPASCAL, MICROMETRE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentMode {
    #[default]
    Characterization,
    WaferTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Valid,
    Type1NoMembrane,
    Type2Asymmetric,
    OutOfRange,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::Valid => "valid",
            Classification::Type1NoMembrane => "type1_no_membrane",
            Classification::Type2Asymmetric => "type2_asymmetric",
            Classification::OutOfRange => "out_of_range",
        }
    }
}

/// Acceptance window and EIE limits of one identified parameter (SI).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterLimit {
    pub parameter: Parameter,
    pub range: (f64, f64),
    pub max_eie: f64,
    pub max_eie_n: f64,
}

impl ParameterLimit {
    /// 0.25 um / 2 % for thickness, 20 MPa / 50 % for stress.
    pub fn default_for(parameter: Parameter, range: (f64, f64)) -> Self {
        let (max_eie, max_eie_n) = match parameter {
            Parameter::Thickness => (0.25 * MICROMETRE, 0.02),
            Parameter::Stress => (20.0 * MEGAPASCAL, 0.5),
        };
        ParameterLimit {
            parameter,
            range,
            max_eie,
            max_eie_n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationConfig {
    /// one entry per surrogate parameter, same order
    pub limits: Vec<ParameterLimit>,
    pub mode_count: usize,
    pub param_count: usize,
    /// relative split of a degenerate pair above which the die is asymmetric
    pub degenerate_split_tolerance: f64,
    pub mode: IdentMode,
    /// relative widening of every mode's training frequency range when
    /// collecting candidate peaks
    pub window_margin: f64,
    /// estimates may leave `range` by this fraction of its span and still
    /// count as feasible
    pub feasibility_margin: f64,
}

impl IdentificationConfig {
    /// Defaults with parameter ranges taken from the surrogate's training grid.
    pub fn for_surrogate(s: &InverseSurrogate, mode: IdentMode) -> Self {
        let range = |g: &[f64]| (g[0], g[g.len() - 1]);
        let limits = s
            .parameters
            .iter()
            .map(|&p| {
                let r = match p {
                    Parameter::Thickness => range(&s.z_grid),
                    Parameter::Stress => range(&s.s_grid),
                };
                ParameterLimit::default_for(p, r)
            })
            .collect();
        IdentificationConfig {
            limits,
            mode_count: s.mode_count(),
            param_count: s.param_count(),
            degenerate_split_tolerance: 5e-3,
            mode,
            window_margin: 0.1,
            feasibility_margin: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("identification: {m}")));
        if self.param_count == 0 || self.mode_count <= self.param_count {
            return bad(format!(
                "mode count {} must exceed parameter count {}",
                self.mode_count, self.param_count
            ));
        }
        if self.limits.len() != self.param_count {
            return bad("one limit entry per parameter is required".into());
        }
        for l in &self.limits {
            if !(l.range.0 < l.range.1) {
                return bad(format!("{} range is empty", l.parameter));
            }
            if !(l.max_eie > 0.0 && l.max_eie_n > 0.0) {
                return bad(format!("{} limits must be positive", l.parameter));
            }
        }
        if !(self.degenerate_split_tolerance > 0.0 && self.window_margin >= 0.0 && self.feasibility_margin >= 0.0) {
            return bad("tolerances must be positive".into());
        }
        Ok(())
    }

    pub fn limit(&self, p: Parameter) -> Option<&ParameterLimit> {
        self.limits.iter().find(|l| l.parameter == p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationResult {
    pub parameters: Vec<Parameter>,
    /// mode position of every detected peak, `None` for skipped peaks
    pub assignment: Vec<Option<usize>>,
    /// frequency used for every mode position; empty without a feasible assignment
    pub mode_frequencies: Vec<f64>,
    pub per_combo_params: Vec<Vec<f64>>,
    pub mean_params: Vec<f64>,
    pub eie: Vec<f64>,
    pub eie_n: Vec<Option<f64>>,
    /// largest relative split among positions assigned two peaks
    pub degenerate_split: Option<f64>,
    /// mode positions without any candidate peak in their window
    pub missing_modes: usize,
    pub failure_bit: bool,
    pub classification: Classification,
    pub extrapolated: bool,
}

impl IdentificationResult {
    pub fn param(&self, p: Parameter) -> Option<f64> {
        let i = self.parameters.iter().position(|&q| q == p)?;
        self.mean_params.get(i).copied()
    }

    pub fn eie_of(&self, p: Parameter) -> Option<(f64, Option<f64>)> {
        let i = self.parameters.iter().position(|&q| q == p)?;
        Some((*self.eie.get(i)?, self.eie_n[i]))
    }
}

/// Componentwise spread `max - min` and spread over mean of the estimates.
/// A zero mean leaves the normalized value absent.
pub fn eie(estimates: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Option<f64>>)> {
    if estimates.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "EIE needs at least 2 estimates, got {}",
            estimates.len()
        )));
    }
    let d = estimates[0].len();
    if estimates.iter().any(|e| e.len() != d) {
        return Err(Error::Mismatch("estimates differ in length".into()));
    }
    let mut spread = Vec::with_capacity(d);
    let mut normalized = Vec::with_capacity(d);
    for k in 0..d {
        let (lo, hi, sum) = estimates
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(lo, hi, s), e| {
                (lo.min(e[k]), hi.max(e[k]), s + e[k])
            });
        let mean = sum / estimates.len() as f64;
        let e = hi - lo;
        spread.push(e);
        normalized.push(if mean == 0.0 { None } else { Some(e / mean.abs()) });
    }
    Ok((spread, normalized))
}

fn mean_columns(estimates: &[Vec<f64>]) -> Vec<f64> {
    let n = estimates.len() as f64;
    let d = estimates.first().map_or(0, Vec::len);
    (0..d)
        .map(|k| estimates.iter().map(|e| e[k]).sum::<f64>() / n)
        .collect()
}

/// One way to feed a mode position: a single peak or an adjacent split pair.
#[derive(Debug, Clone, Copy)]
enum Pick {
    Single(usize),
    Pair(usize, usize),
}

impl Pick {
    fn last(self) -> usize {
        match self {
            Pick::Single(i) | Pick::Pair(_, i) => i,
        }
    }

    fn frequency(self, peaks: &[Peak]) -> f64 {
        match self {
            Pick::Single(i) => peaks[i].frequency,
            Pick::Pair(i, j) => 0.5 * (peaks[i].frequency + peaks[j].frequency),
        }
    }

    fn split(self, peaks: &[Peak]) -> Option<f64> {
        match self {
            Pick::Single(_) => None,
            Pick::Pair(i, j) => {
                let (a, b) = (peaks[i].frequency, peaks[j].frequency);
                Some((b - a) / (0.5 * (a + b)))
            }
        }
    }
}

struct Candidate {
    picks: Vec<Pick>,
    estimates: Vec<Vec<f64>>,
    extrapolated: bool,
    objective: f64,
}

fn check_compat(s: &InverseSurrogate, cfg: &IdentificationConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.mode_count != s.mode_count() || cfg.param_count != s.param_count() {
        return Err(Error::Mismatch(format!(
            "configuration expects K = {}, d = {} but the surrogate has K = {}, d = {}",
            cfg.mode_count,
            cfg.param_count,
            s.mode_count(),
            s.param_count()
        )));
    }
    if cfg.limits.iter().map(|l| l.parameter).ne(s.parameters.iter().copied()) {
        return Err(Error::Mismatch(
            "parameter order differs between configuration and surrogate".into(),
        ));
    }
    Ok(())
}

fn windows(s: &InverseSurrogate, cfg: &IdentificationConfig) -> Vec<(f64, f64)> {
    s.mode_domains
        .iter()
        .map(|&(lo, hi)| (lo * (1.0 - cfg.window_margin), hi * (1.0 + cfg.window_margin)))
        .collect()
}

/// Candidate options for every mode position.
fn options(peaks: &[Peak], s: &InverseSurrogate, cfg: &IdentificationConfig) -> Vec<Vec<Pick>> {
    windows(s, cfg)
        .iter()
        .zip(&s.mode_groups)
        .map(|(&(lo, hi), group)| {
            let inside: Vec<usize> = (0..peaks.len())
                .filter(|&i| peaks[i].frequency >= lo && peaks[i].frequency <= hi)
                .collect();
            let mut opts: Vec<Pick> = inside.iter().map(|&i| Pick::Single(i)).collect();
            if group.len() > 1 {
                opts.extend(
                    inside
                        .windows(2)
                        .filter(|w| w[1] == w[0] + 1)
                        .map(|w| Pick::Pair(w[0], w[1])),
                );
            }
            opts
        })
        .collect()
}

/// True when some peak left unassigned lies in a position's window and is
/// stronger than what that position took.
fn skips_stronger_peak(picks: &[Pick], peaks: &[Peak], windows: &[(f64, f64)]) -> bool {
    let mut used = vec![false; peaks.len()];
    for p in picks {
        match *p {
            Pick::Single(i) => used[i] = true,
            Pick::Pair(i, j) => {
                used[i] = true;
                used[j] = true;
            }
        }
    }
    picks.iter().zip(windows).any(|(p, &(lo, hi))| {
        let taken = match *p {
            Pick::Single(i) => peaks[i].amplitude,
            Pick::Pair(i, j) => peaks[i].amplitude.max(peaks[j].amplitude),
        };
        peaks
            .iter()
            .zip(&used)
            .any(|(q, &u)| !u && q.frequency >= lo && q.frequency <= hi && q.amplitude > taken)
    })
}

fn score(estimates: &[Vec<f64>], cfg: &IdentificationConfig) -> Option<f64> {
    for e in estimates {
        for (v, l) in e.iter().zip(&cfg.limits) {
            let pad = cfg.feasibility_margin * (l.range.1 - l.range.0);
            if !(v.is_finite() && *v >= l.range.0 - pad && *v <= l.range.1 + pad) {
                return None;
            }
        }
    }
    let (spread, normalized) = eie(estimates).ok()?;
    Some(
        spread
            .iter()
            .zip(&normalized)
            .zip(&cfg.limits)
            .map(|((e, n), l)| n.unwrap_or(e / (l.range.1 - l.range.0)))
            .sum(),
    )
}

#[allow(clippy::too_many_arguments)]
fn search(
    pos: usize,
    next: usize,
    opts: &[Vec<Pick>],
    windows: &[(f64, f64)],
    peaks: &[Peak],
    s: &InverseSurrogate,
    cfg: &IdentificationConfig,
    picks: &mut Vec<Pick>,
    best: &mut Option<Candidate>,
) {
    if pos == opts.len() {
        if skips_stronger_peak(picks, peaks, windows) {
            return;
        }
        let freqs: Vec<f64> = picks.iter().map(|p| p.frequency(peaks)).collect();
        let evals = s.evaluate_all(&freqs);
        let extrapolated = evals.iter().any(|e| e.extrapolated);
        let estimates: Vec<Vec<f64>> = evals.into_iter().map(|e| e.params).collect();
        if let Some(objective) = score(&estimates, cfg) {
            if best.as_ref().is_none_or(|b| objective < b.objective) {
                *best = Some(Candidate {
                    picks: picks.clone(),
                    estimates,
                    extrapolated,
                    objective,
                });
            }
        }
        return;
    }
    for &pick in &opts[pos] {
        let first = match pick {
            Pick::Single(i) | Pick::Pair(i, _) => i,
        };
        if first < next {
            continue;
        }
        picks.push(pick);
        search(pos + 1, pick.last() + 1, opts, windows, peaks, s, cfg, picks, best);
        picks.pop();
    }
}

/// True when any EIE or EIE_N exceeds its limit.
pub fn limits_exceeded(result: &IdentificationResult, cfg: &IdentificationConfig) -> bool {
    result
        .eie
        .iter()
        .zip(&result.eie_n)
        .zip(&cfg.limits)
        .any(|((&e, n), l)| e > l.max_eie || n.is_some_and(|n| n > l.max_eie_n))
}

/// Classification of an identification attempt.
pub fn classify(result: &IdentificationResult, peaks: &[Peak], cfg: &IdentificationConfig) -> Classification {
    if peaks.is_empty() {
        return Classification::Type1NoMembrane;
    }
    if result.mode_frequencies.is_empty() {
        return if result.missing_modes > 0 {
            Classification::Type1NoMembrane
        } else {
            Classification::OutOfRange
        };
    }
    if result
        .degenerate_split
        .is_some_and(|s| s > cfg.degenerate_split_tolerance)
        || limits_exceeded(result, cfg)
    {
        return Classification::Type2Asymmetric;
    }
    let outside = result
        .mean_params
        .iter()
        .zip(&cfg.limits)
        .any(|(&v, l)| v < l.range.0 || v > l.range.1);
    if outside {
        return Classification::OutOfRange;
    }
    Classification::Valid
}

/// Assigns peaks to mode positions by minimal EIE, identifies the
/// parameters and classifies the die.
pub fn assign_and_identify(
    peaks: &[Peak],
    surrogate: &InverseSurrogate,
    cfg: &IdentificationConfig,
) -> Result<IdentificationResult> {
    check_compat(surrogate, cfg)?;
    let opts = options(peaks, surrogate, cfg);
    let missing_modes = opts.iter().filter(|o| o.is_empty()).count();
    let mut best = None;
    if missing_modes == 0 {
        search(
            0,
            0,
            &opts,
            &windows(surrogate, cfg),
            peaks,
            surrogate,
            cfg,
            &mut Vec::new(),
            &mut best,
        );
    }

    let d = surrogate.param_count();
    let mut result = IdentificationResult {
        parameters: surrogate.parameters.clone(),
        assignment: vec![None; peaks.len()],
        mode_frequencies: Vec::new(),
        per_combo_params: Vec::new(),
        mean_params: Vec::new(),
        eie: Vec::new(),
        eie_n: Vec::new(),
        degenerate_split: None,
        missing_modes,
        failure_bit: true,
        classification: Classification::Type1NoMembrane,
        extrapolated: false,
    };
    if let Some(c) = best {
        for (pos, pick) in c.picks.iter().enumerate() {
            match *pick {
                Pick::Single(i) => result.assignment[i] = Some(pos),
                Pick::Pair(i, j) => {
                    result.assignment[i] = Some(pos);
                    result.assignment[j] = Some(pos);
                }
            }
        }
        result.mode_frequencies = c.picks.iter().map(|p| p.frequency(peaks)).collect();
        result.degenerate_split = c
            .picks
            .iter()
            .filter_map(|p| p.split(peaks))
            .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))));
        let (spread, normalized) = eie(&c.estimates)?;
        result.mean_params = mean_columns(&c.estimates);
        result.per_combo_params = c.estimates;
        result.eie = spread;
        result.eie_n = normalized;
        result.extrapolated = c.extrapolated;
    }
    debug_assert!(result.mean_params.is_empty() || result.mean_params.len() == d);
    result.classification = classify(&result, peaks, cfg);
    result.failure_bit = result.classification != Classification::Valid || limits_exceeded(&result, cfg);
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizationConfig {
    pub min_dies: usize,
    /// percentile (0 to 100) of the EIE of valid dies used as recommended limit
    pub eie_percentile: f64,
}

impl Default for CharacterizationConfig {
    fn default() -> Self {
        CharacterizationConfig {
            min_dies: 12,
            eie_percentile: 95.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationReport {
    /// Pa
    pub calibrated_stress: f64,
    /// per parameter, SI
    pub recommended_max_eie: Vec<(Parameter, f64)>,
    pub dies_used: usize,
    pub valid_dies: usize,
}

/// Linear-interpolation percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Calibrates the stress (median over valid dies) and proposes EIE limits.
pub fn characterize(results: &[IdentificationResult], cfg: &CharacterizationConfig) -> Result<CharacterizationReport> {
    if results.len() < cfg.min_dies {
        return Err(Error::InsufficientData(format!(
            "characterization needs at least {} dies, got {}",
            cfg.min_dies,
            results.len()
        )));
    }
    let valid: Vec<&IdentificationResult> = results.iter().filter(|r| !r.failure_bit).collect();
    if valid.is_empty() {
        return Err(Error::InsufficientData(
            "no valid die among the calibration dies".into(),
        ));
    }
    let parameters = valid[0].parameters.clone();
    if valid.iter().any(|r| r.parameters != parameters) {
        return Err(Error::Mismatch(
            "calibration dies were identified with different parameter sets".into(),
        ));
    }
    let stress_at = parameters
        .iter()
        .position(|&p| p == Parameter::Stress)
        .ok_or_else(|| Error::Mismatch("characterization requires stress among the identified parameters".into()))?;
    let stresses: Vec<f64> = valid.iter().map(|r| r.mean_params[stress_at]).collect();
    let calibrated_stress = percentile(&stresses, 50.0).expect("non-empty");
    let recommended_max_eie = parameters
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let e: Vec<f64> = valid.iter().map(|r| r.eie[k]).collect();
            (p, percentile(&e, cfg.eie_percentile).expect("non-empty"))
        })
        .collect();
    Ok(CharacterizationReport {
        calibrated_stress,
        recommended_max_eie,
        dies_used: results.len(),
        valid_dies: valid.len(),
    })
}
