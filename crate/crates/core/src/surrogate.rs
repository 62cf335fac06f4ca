//! Inverse polynomial response surfaces: sensor parameters as tensor-product
//! polynomials of modal-frequency combinations.
//!
//! Every size-`d` subset of the `K` mode positions gets one surface per
//! identified parameter. Frequencies are mapped affinely onto `[-1, 1]`
//! per input before fitting; the map is stored with the surface. The
//! polynomial degree is the lowest one that reproduces every training node
//! within the requested accuracy.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plate_model::{ModeIndex, ParameterMatrix};
use crate::units::linspace;

/// Default relative accuracy of the approximation.
pub const DEFAULT_ACCURACY: f64 = 1e-3;
pub const DEFAULT_MAX_DEGREE: u32 = 6;
const FORMAT_VERSION: u32 = 1;

/// Default thickness axis: 14 to 16 um in 9 points.
pub fn default_z_grid() -> Vec<f64> {
    linspace(14e-6, 16e-6, 9)
}

/// Default stress axis: 25 to 75 MPa in 9 points.
pub fn default_s_grid() -> Vec<f64> {
    linspace(25e6, 75e6, 9)
}

/// Nodes with a parameter value smaller than this fraction of the grid's
/// full scale are compared against that floor instead of their own value.
const RELATIVE_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    Thickness,
    Stress,
}

impl Parameter {
    fn grid(self, pm: &ParameterMatrix) -> &[f64] {
        match self {
            Parameter::Thickness => pm.z_grid(),
            Parameter::Stress => pm.s_grid(),
        }
    }

    fn node_value(self, pm: &ParameterMatrix, iz: usize, is: usize) -> f64 {
        match self {
            Parameter::Thickness => pm.z_grid()[iz],
            Parameter::Stress => pm.s_grid()[is],
        }
    }
}

impl fmt::Display for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameter::Thickness => "thickness",
            Parameter::Stress => "stress",
        })
    }
}

/// Parameters varied by a matrix, in canonical order.
pub fn varied_parameters(pm: &ParameterMatrix) -> Vec<Parameter> {
    let mut out = Vec::new();
    if pm.z_grid().len() > 1 {
        out.push(Parameter::Thickness);
    }
    if pm.s_grid().len() > 1 {
        out.push(Parameter::Stress);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyCombo {
    pub index: usize,
    /// ascending, distinct mode positions
    pub modes: Vec<usize>,
}

/// All `C(k, d)` combinations in lexicographic order.
pub fn enumerate_combos(k: usize, d: usize) -> Vec<FrequencyCombo> {
    fn rec(start: usize, k: usize, d: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == d {
            out.push(cur.clone());
            return;
        }
        for i in start..k {
            cur.push(i);
            rec(i + 1, k, d, cur, out);
            cur.pop();
        }
    }
    let mut subsets = Vec::new();
    rec(0, k, d, &mut Vec::new(), &mut subsets);
    subsets
        .into_iter()
        .enumerate()
        .map(|(index, modes)| FrequencyCombo { index, modes })
        .collect()
}

/// Exponent tuples of the tensor basis with every exponent `<= degree`,
/// ordered by highest exponent, then total degree, then descending
/// lexicographically. For `d = 2`, degree 2 this is
/// `1, f1, f2, f1 f2, f1^2, f2^2, f1^2 f2, f1 f2^2, f1^2 f2^2`.
pub fn monomial_exponents(d: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = vec![Vec::new()];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..=degree).map(move |e| {
                    let mut v = prefix.clone();
                    v.push(e);
                    v
                })
            })
            .collect();
    }
    out.sort_by(|a, b| {
        let key = |v: &Vec<u32>| (v.iter().copied().max().unwrap_or(0), v.iter().sum::<u32>());
        key(a).cmp(&key(b)).then_with(|| b.cmp(a))
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub center: f64,
    pub half_span: f64,
}

impl AffineMap {
    fn from_range(lo: f64, hi: f64) -> Self {
        let half = 0.5 * (hi - lo);
        AffineMap {
            center: 0.5 * (hi + lo),
            // a constant input still needs an invertible map
            half_span: if half > 0.0 { half } else { lo.abs().max(1.0) },
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.center) / self.half_span
    }
}

/// One parameter as a polynomial of `d` scaled frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolySurface {
    pub target: Parameter,
    /// mode positions feeding this surface
    pub inputs: Vec<usize>,
    pub degree: u32,
    pub scaling: Vec<AffineMap>,
    /// in the order of [`monomial_exponents`]
    pub coefficients: Vec<f64>,
}

impl PolySurface {
    /// Evaluates at raw frequencies (Hz), one per input.
    pub fn eval(&self, freqs: &[f64]) -> f64 {
        let d = self.inputs.len();
        debug_assert_eq!(freqs.len(), d);
        let deg = self.degree as usize;
        let powers: Vec<Vec<f64>> = freqs
            .iter()
            .zip(&self.scaling)
            .map(|(&f, map)| {
                let x = map.apply(f);
                let mut p = Vec::with_capacity(deg + 1);
                let mut acc = 1.0;
                for _ in 0..=deg {
                    p.push(acc);
                    acc *= x;
                }
                p
            })
            .collect();
        monomial_exponents(d, self.degree)
            .iter()
            .zip(&self.coefficients)
            .map(|(exps, c)| c * exps.iter().zip(&powers).map(|(&e, p)| p[e as usize]).product::<f64>())
            .sum()
    }

    fn validate(&self) -> Result<()> {
        let d = self.inputs.len() as i32;
        let expected = (self.degree as usize + 1).pow(d as u32);
        if self.coefficients.len() != expected {
            return Err(Error::Domain(format!(
                "surface for {} has {} coefficients, degree {} needs {expected}",
                self.target,
                self.coefficients.len(),
                self.degree
            )));
        }
        if self.scaling.len() != self.inputs.len() {
            return Err(Error::Domain("scaling map count must match inputs".into()));
        }
        if self.coefficients.iter().any(|c| !c.is_finite())
            || self
                .scaling
                .iter()
                .any(|m| !(m.center.is_finite() && m.half_span.is_finite() && m.half_span != 0.0))
        {
            return Err(Error::Domain("surface has non-finite coefficients".into()));
        }
        Ok(())
    }
}

/// The surfaces of one frequency combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboSurfaces {
    pub combo: FrequencyCombo,
    /// one per identified parameter, in [`InverseSurrogate::parameters`] order
    pub surfaces: Vec<PolySurface>,
    /// worst relative error over the training nodes
    pub max_rel_error: f64,
    /// training bounding box, one `(min, max)` per input (Hz)
    #[serde(rename = "frequency_domain_hz")]
    pub frequency_domain: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseSurrogate {
    pub format_version: u32,
    pub parameters: Vec<Parameter>,
    pub mode_groups: Vec<Vec<ModeIndex>>,
    /// training frequency range of every mode position (Hz)
    #[serde(rename = "mode_domains_hz")]
    pub mode_domains: Vec<(f64, f64)>,
    pub accuracy: f64,
    #[serde(rename = "z_grid_m")]
    pub z_grid: Vec<f64>,
    #[serde(rename = "s_grid_pa")]
    pub s_grid: Vec<f64>,
    pub combos: Vec<ComboSurfaces>,
}

/// Result of evaluating one combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// in [`InverseSurrogate::parameters`] order (SI)
    pub params: Vec<f64>,
    /// some input lay outside the training domain
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitWarning {
    AccuracyNotReached {
        combo: usize,
        degree: u32,
        achieved: f64,
        required: f64,
    },
    Oscillation {
        combo: usize,
        parameter: Parameter,
        excess: f64,
    },
}

impl fmt::Display for FitWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitWarning::AccuracyNotReached {
                combo,
                degree,
                achieved,
                required,
            } => write!(
                f,
                "combination {combo}: required accuracy is not reached \
                 (best {achieved:.3e} at degree {degree}, required {required:.3e})"
            ),
            FitWarning::Oscillation {
                combo,
                parameter,
                excess,
            } => write!(
                f,
                "combination {combo}: {parameter} surface oscillates between reference points \
                 (overshoot {excess:.3e}); recalculate the parameter matrix with closer reference points"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub surrogate: InverseSurrogate,
    pub warnings: Vec<FitWarning>,
}

impl FitOutcome {
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OscillationVerdict {
    Pass,
    Warning { excess: f64 },
}

fn full_scale(grid: &[f64]) -> f64 {
    grid.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Error of `pred` against a grid node value, relative to the node value but
/// never to less than a tenth of the grid's full scale.
pub fn relative_error(pred: f64, truth: f64, full_scale: f64) -> f64 {
    let denom = truth.abs().max(RELATIVE_FLOOR * full_scale);
    if denom == 0.0 {
        (pred - truth).abs()
    } else {
        (pred - truth).abs() / denom
    }
}

fn nodes(pm: &ParameterMatrix) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..pm.z_grid().len()).flat_map(move |iz| (0..pm.s_grid().len()).map(move |is| (iz, is)))
}

fn input_domain(pm: &ParameterMatrix, inputs: &[usize]) -> Vec<(f64, f64)> {
    inputs
        .iter()
        .map(|&k| {
            nodes(pm).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (iz, is)| {
                let f = pm.frequency(iz, is, k);
                (lo.min(f), hi.max(f))
            })
        })
        .collect()
}

fn design_matrix(pm: &ParameterMatrix, inputs: &[usize], scaling: &[AffineMap], degree: u32) -> DMatrix<f64> {
    let exps = monomial_exponents(inputs.len(), degree);
    let rows: Vec<(usize, usize)> = nodes(pm).collect();
    DMatrix::from_fn(rows.len(), exps.len(), |r, c| {
        let (iz, is) = rows[r];
        exps[c]
            .iter()
            .zip(inputs.iter().zip(scaling))
            .map(|(&e, (&k, map))| map.apply(pm.frequency(iz, is, k)).powi(e as i32))
            .product()
    })
}

fn targets(pm: &ParameterMatrix, target: Parameter) -> DVector<f64> {
    let vals: Vec<f64> = nodes(pm).map(|(iz, is)| target.node_value(pm, iz, is)).collect();
    DVector::from_vec(vals)
}

/// Least-squares fit of one surface at a fixed degree. Uses an SVD solve, so
/// underdetermined systems yield the minimum-norm interpolant.
pub fn fit_surface(pm: &ParameterMatrix, inputs: &[usize], target: Parameter, degree: u32) -> Result<PolySurface> {
    let scaling: Vec<AffineMap> = input_domain(pm, inputs)
        .into_iter()
        .map(|(lo, hi)| AffineMap::from_range(lo, hi))
        .collect();
    let a = design_matrix(pm, inputs, &scaling, degree);
    let coefficients = solve_least_squares(a, &targets(pm, target))?;
    Ok(PolySurface {
        target,
        inputs: inputs.to_vec(),
        degree,
        scaling,
        coefficients,
    })
}

fn solve_least_squares(a: DMatrix<f64>, b: &DVector<f64>) -> Result<Vec<f64>> {
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let x = svd
        .solve(b, smax * 1e-13)
        .map_err(|e| Error::Domain(format!("least-squares solve failed: {e}")))?;
    Ok(x.iter().copied().collect())
}

fn numerical_rank(a: &DMatrix<f64>) -> usize {
    let sv = a.clone().singular_values();
    let smax = sv.max();
    sv.iter().filter(|&&s| s > smax * 1e-10).count()
}

/// Worst relative error of `surfaces` over all training nodes.
fn training_error(pm: &ParameterMatrix, surfaces: &[PolySurface]) -> f64 {
    let mut worst: f64 = 0.0;
    for s in surfaces {
        let fs = full_scale(s.target.grid(pm));
        for (iz, is) in nodes(pm) {
            let freqs: Vec<f64> = s.inputs.iter().map(|&k| pm.frequency(iz, is, k)).collect();
            let e = relative_error(s.eval(&freqs), s.target.node_value(pm, iz, is), fs);
            worst = worst.max(e);
        }
    }
    worst
}

/// Evaluates the surface at the frequency midpoint of every grid cell and
/// warns when the value leaves the range spanned by the cell's corner
/// parameters by more than `accuracy` (relative, same norm as the fit).
pub fn oscillation_check(surface: &PolySurface, pm: &ParameterMatrix, accuracy: f64) -> OscillationVerdict {
    let cells = |n: usize| -> Vec<(usize, usize)> {
        if n > 1 {
            (0..n - 1).map(|i| (i, i + 1)).collect()
        } else {
            vec![(0, 0)]
        }
    };
    let fs = full_scale(surface.target.grid(pm));
    let mut worst: f64 = 0.0;
    for (z0, z1) in cells(pm.z_grid().len()) {
        for (s0, s1) in cells(pm.s_grid().len()) {
            let mut corners = vec![(z0, s0), (z0, s1), (z1, s0), (z1, s1)];
            corners.dedup();
            corners.sort();
            corners.dedup();
            let n = corners.len() as f64;
            let mid: Vec<f64> = surface
                .inputs
                .iter()
                .map(|&k| corners.iter().map(|&(iz, is)| pm.frequency(iz, is, k)).sum::<f64>() / n)
                .collect();
            let v = surface.eval(&mid);
            let vals = corners.iter().map(|&(iz, is)| surface.target.node_value(pm, iz, is));
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
            let excess = (lo - v).max(v - hi).max(0.0);
            let denom = lo.abs().max(hi.abs()).max(RELATIVE_FLOOR * fs);
            let rel = if denom > 0.0 { excess / denom } else { excess };
            worst = worst.max(rel);
        }
    }
    if worst > accuracy {
        OscillationVerdict::Warning { excess: worst }
    } else {
        OscillationVerdict::Pass
    }
}

/// Fits the inverse surrogate with automatic degree selection.
pub fn fit_inverse(pm: &ParameterMatrix, accuracy: f64, max_degree: u32) -> Result<FitOutcome> {
    if !(accuracy > 0.0 && accuracy.is_finite()) {
        return Err(Error::Config(format!("accuracy must be positive, got {accuracy}")));
    }
    if max_degree < 1 {
        return Err(Error::Config("max degree must be >= 1".into()));
    }
    let parameters = varied_parameters(pm);
    let d = parameters.len();
    if d == 0 || d > 2 {
        return Err(Error::Domain(format!("unsupported parameter count {d}")));
    }
    let k = pm.mode_count();
    if k < d + 1 {
        return Err(Error::Domain(format!("{k} modes cannot identify {d} parameters")));
    }
    let node_count = pm.z_grid().len() * pm.s_grid().len();

    let mut warnings = Vec::new();
    let mut combos = Vec::new();
    for combo in enumerate_combos(k, d) {
        let mut best: Option<(f64, Vec<PolySurface>)> = None;
        let mut reached = false;
        for degree in 1..=max_degree {
            if (degree as usize + 1).pow(d as u32) > node_count {
                break;
            }
            let probe = fit_surface(pm, &combo.modes, parameters[0], degree)?;
            let a = design_matrix(pm, &combo.modes, &probe.scaling, degree);
            if numerical_rank(&a) < a.ncols() {
                if degree == 1 {
                    return Err(Error::RankDeficient {
                        combo: combo.index,
                        degree,
                    });
                }
                break;
            }
            let mut surfaces = vec![probe];
            for &p in &parameters[1..] {
                surfaces.push(fit_surface(pm, &combo.modes, p, degree)?);
            }
            let err = training_error(pm, &surfaces);
            if best.as_ref().is_none_or(|(e, _)| err < *e) {
                best = Some((err, surfaces));
            }
            if err <= accuracy {
                reached = true;
                break;
            }
        }
        let (err, surfaces) = best.ok_or_else(|| {
            Error::InsufficientData(format!("{node_count} grid nodes cannot support even a degree-1 fit"))
        })?;
        if !reached {
            warnings.push(FitWarning::AccuracyNotReached {
                combo: combo.index,
                degree: surfaces[0].degree,
                achieved: err,
                required: accuracy,
            });
        }
        for s in &surfaces {
            if let OscillationVerdict::Warning { excess } = oscillation_check(s, pm, accuracy) {
                warnings.push(FitWarning::Oscillation {
                    combo: combo.index,
                    parameter: s.target,
                    excess,
                });
            }
        }
        combos.push(ComboSurfaces {
            frequency_domain: input_domain(pm, &combo.modes),
            combo,
            surfaces,
            max_rel_error: err,
        });
    }

    let mode_domains = input_domain(pm, &(0..k).collect::<Vec<_>>());
    Ok(FitOutcome {
        surrogate: InverseSurrogate {
            format_version: FORMAT_VERSION,
            parameters,
            mode_groups: pm.mode_groups().to_vec(),
            mode_domains,
            accuracy,
            z_grid: pm.z_grid().to_vec(),
            s_grid: pm.s_grid().to_vec(),
            combos,
        },
        warnings,
    })
}

impl InverseSurrogate {
    pub fn param_count(&self) -> usize {
        self.parameters.len()
    }

    pub fn mode_count(&self) -> usize {
        self.mode_groups.len()
    }

    pub fn param_position(&self, p: Parameter) -> Option<usize> {
        self.parameters.iter().position(|&q| q == p)
    }

    /// Worst training error over all combinations.
    pub fn max_fit_error(&self) -> f64 {
        self.combos.iter().fold(0.0, |m, c| m.max(c.max_rel_error))
    }

    /// Evaluates combination `combo_index` at the given frequencies (Hz), one
    /// per mode of the combination.
    ///
    /// Panics if `combo_index` is out of range or `freqs` has the wrong length.
    pub fn evaluate(&self, combo_index: usize, freqs: &[f64]) -> Evaluation {
        let c = &self.combos[combo_index];
        assert_eq!(freqs.len(), c.combo.modes.len(), "frequency count mismatch");
        let extrapolated = freqs
            .iter()
            .zip(&c.frequency_domain)
            .any(|(&f, &(lo, hi))| f < lo || f > hi);
        Evaluation {
            params: c.surfaces.iter().map(|s| s.eval(freqs)).collect(),
            extrapolated,
        }
    }

    /// Evaluates every combination given one frequency per mode position.
    pub fn evaluate_all(&self, mode_freqs: &[f64]) -> Vec<Evaluation> {
        assert_eq!(mode_freqs.len(), self.mode_count(), "one frequency per mode position");
        self.combos
            .iter()
            .map(|c| {
                let f: Vec<f64> = c.combo.modes.iter().map(|&k| mode_freqs[k]).collect();
                self.evaluate(c.combo.index, &f)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Domain(format!(
                "unsupported surrogate format version {}",
                self.format_version
            )));
        }
        let d = self.parameters.len();
        let k = self.mode_count();
        if d == 0 || k <= d || self.mode_domains.len() != k {
            return Err(Error::Domain("inconsistent parameter/mode counts".into()));
        }
        if self.combos.len() != enumerate_combos(k, d).len() {
            return Err(Error::Domain("combination count must be C(K, d)".into()));
        }
        for (i, c) in self.combos.iter().enumerate() {
            if c.combo.index != i
                || c.combo.modes.len() != d
                || c.combo.modes.windows(2).any(|w| w[1] <= w[0])
                || c.combo.modes.iter().any(|&m| m >= k)
                || c.surfaces.len() != d
                || c.frequency_domain.len() != d
            {
                return Err(Error::Domain(format!("malformed combination {i}")));
            }
            for (s, &p) in c.surfaces.iter().zip(&self.parameters) {
                if s.target != p || s.inputs != c.combo.modes {
                    return Err(Error::Domain(format!("surface mismatch in combination {i}")));
                }
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("surrogate serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let s: InverseSurrogate = serde_json::from_str(text).map_err(|e| Error::json(origin, &e))?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}
