//! Analytic forward model of a prestressed, simply supported rectangular
//! membrane: modal frequencies, Navier-series statics and the bridge output
//! of a piezoresistor placed on the membrane.
//!
//! The membrane is a Kirchhoff plate of thickness `z` carrying a thin stressed
//! passivation film. The film contributes in-plane tension `N = s * t_pass`
//! and areal mass `rho_pass * t_pass`; its bending stiffness is neglected.
//! For mode `(m, n)` with `kappa = (m pi / a)^2 + (n pi / b)^2`:
//!
//! ```text
//! f_mn = 1/(2 pi) * sqrt((D kappa^2 + N kappa) / rho_A)
//! D    = E z^3 / (12 (1 - nu^2))
//! ```

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{GIGAPASCAL, MEGAPASCAL, MICROMETRE};

/// Default odd truncation order of the Navier double-sine series.
pub const DEFAULT_SERIES_ORDER: u32 = 99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialProps {
    /// Pa
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    /// kg/m^3
    pub density: f64,
}

impl MaterialProps {
    pub fn silicon() -> Self {
        MaterialProps {
            youngs_modulus: 169.0 * GIGAPASCAL,
            poisson_ratio: 0.22,
            density: 2330.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.youngs_modulus > 0.0 && self.youngs_modulus.is_finite()) {
            return Err(Error::Domain("Young's modulus must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.poisson_ratio) {
            return Err(Error::Domain("Poisson ratio must lie in [0, 0.5)".into()));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::Domain("density must be positive".into()));
        }
        Ok(())
    }
}

impl Default for MaterialProps {
    fn default() -> Self {
        Self::silicon()
    }
}

/// Lateral membrane size, membrane thickness and passivation film. All in m
/// and kg/m^3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MembraneGeometry {
    pub side_a: f64,
    pub side_b: f64,
    pub thickness: f64,
    pub passivation_thickness: f64,
    pub passivation_density: f64,
}

impl MembraneGeometry {
    pub fn validate(&self) -> Result<()> {
        let lengths = [
            ("side_a", self.side_a),
            ("side_b", self.side_b),
            ("thickness", self.thickness),
            ("passivation_thickness", self.passivation_thickness),
        ];
        for (name, v) in lengths {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.passivation_density >= 0.0 && self.passivation_density.is_finite()) {
            return Err(Error::Domain("passivation density must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_thickness(mut self, thickness: f64) -> Self {
        self.thickness = thickness;
        self
    }

    pub fn contains(&self, (x, y): (f64, f64)) -> bool {
        x > 0.0 && x < self.side_a && y > 0.0 && y < self.side_b
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * self.side_a, 0.5 * self.side_b)
    }

    fn check_point(&self, point: (f64, f64)) -> Result<()> {
        if self.contains(point) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "point ({:.4e}, {:.4e}) m is not inside the membrane",
                point.0, point.1
            )))
        }
    }
}

/// Passivation film stress in Pa, tensile positive.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StressState {
    pub passivation_stress: f64,
}

impl StressState {
    pub fn new(passivation_stress: f64) -> Self {
        StressState { passivation_stress }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeIndex {
    pub m: u32,
    pub n: u32,
}

impl ModeIndex {
    pub fn new(m: u32, n: u32) -> Self {
        assert!(m >= 1 && n >= 1, "mode indices start at 1");
        ModeIndex { m, n }
    }
}

impl std::fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.m, self.n)
    }
}

/// Lumped piezoresistive bridge: `V = gain * supply * (sigma_x - sigma_y)`
/// evaluated at the resistor location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiezoModel {
    /// 1/Pa
    pub gain: f64,
    /// V
    pub supply_voltage: f64,
    /// m, membrane coordinates
    pub resistor_location: (f64, f64),
}

impl PiezoModel {
    pub fn validate(&self, geom: &MembraneGeometry) -> Result<()> {
        if !(self.supply_voltage > 0.0 && self.supply_voltage.is_finite()) {
            return Err(Error::Domain("supply voltage must be positive".into()));
        }
        if !self.gain.is_finite() {
            return Err(Error::Domain("piezo gain must be finite".into()));
        }
        geom.check_point(self.resistor_location)
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }
}

/// A series-evaluated static quantity together with the truncation order
/// used to compute it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesValue {
    pub value: f64,
    pub order: u32,
}

/// Validated plate state with the derived stiffness, tension and mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plate {
    pub geometry: MembraneGeometry,
    pub material: MaterialProps,
    pub stress: StressState,
    rigidity: f64,
    tension: f64,
    areal_mass: f64,
}

impl Plate {
    pub fn new(geometry: MembraneGeometry, material: MaterialProps, stress: StressState) -> Result<Self> {
        geometry.validate()?;
        material.validate()?;
        if !stress.passivation_stress.is_finite() {
            return Err(Error::Domain("stress must be finite".into()));
        }
        let z = geometry.thickness;
        let nu = material.poisson_ratio;
        let rigidity = material.youngs_modulus * z.powi(3) / (12.0 * (1.0 - nu * nu));
        let tension = stress.passivation_stress * geometry.passivation_thickness;
        let areal_mass = material.density * z + geometry.passivation_density * geometry.passivation_thickness;
        let plate = Plate {
            geometry,
            material,
            stress,
            rigidity,
            tension,
            areal_mass,
        };
        let k11 = plate.wavenumber_sq(ModeIndex::new(1, 1));
        if plate.stiffness(k11) <= 0.0 {
            return Err(Error::Buckling {
                thickness: z,
                stress: stress.passivation_stress,
                tension,
                critical: -rigidity * k11,
            });
        }
        Ok(plate)
    }

    pub fn flexural_rigidity(&self) -> f64 {
        self.rigidity
    }

    pub fn tension(&self) -> f64 {
        self.tension
    }

    pub fn areal_mass(&self) -> f64 {
        self.areal_mass
    }

    pub fn wavenumber_sq(&self, mode: ModeIndex) -> f64 {
        let alpha = mode.m as f64 * PI / self.geometry.side_a;
        let beta = mode.n as f64 * PI / self.geometry.side_b;
        alpha * alpha + beta * beta
    }

    /// `D kappa^2 + N kappa`, the modal stiffness per unit modal mass area.
    fn stiffness(&self, kappa: f64) -> f64 {
        self.rigidity * kappa * kappa + self.tension * kappa
    }

    pub fn frequency(&self, mode: ModeIndex) -> f64 {
        (self.stiffness(self.wavenumber_sq(mode)) / self.areal_mass).sqrt() / (2.0 * PI)
    }

    /// The `k` lowest modes, ascending by frequency. Degenerate modes are
    /// ordered by `(m, n)`.
    pub fn modes(&self, k: usize) -> Vec<(ModeIndex, f64)> {
        // every mode with m > k or n > k lies above (k, 1) or (1, k)
        let bound = k.max(1) as u32;
        let mut all: Vec<(ModeIndex, f64)> = (1..=bound)
            .flat_map(|m| (1..=bound).map(move |n| ModeIndex::new(m, n)))
            .map(|mode| (mode, self.wavenumber_sq(mode)))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all.into_iter().map(|(mode, _)| (mode, self.frequency(mode))).collect()
    }

    /// All modes with frequency at or below `limit`, ascending.
    pub fn modes_below(&self, limit: f64) -> Vec<(ModeIndex, f64)> {
        let mut out = Vec::new();
        let mut m = 1;
        while self.frequency(ModeIndex::new(m, 1)) <= limit {
            let mut n = 1;
            loop {
                let mode = ModeIndex::new(m, n);
                let f = self.frequency(mode);
                if f > limit {
                    break;
                }
                out.push((mode, f));
                n += 1;
            }
            m += 1;
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Sums `f(W_mn, alpha_m, beta_n) * sin(alpha_m x) sin(beta_n y)` over odd
    /// `m, n <= order` for unit pressure.
    fn navier_sum(&self, (x, y): (f64, f64), order: u32, term: impl Fn(f64, f64, f64) -> f64) -> f64 {
        let (a, b) = (self.geometry.side_a, self.geometry.side_b);
        let mut total = 0.0;
        for m in (1..=order).step_by(2) {
            let alpha = m as f64 * PI / a;
            let sx = (alpha * x).sin();
            for n in (1..=order).step_by(2) {
                let beta = n as f64 * PI / b;
                let kappa = alpha * alpha + beta * beta;
                let amp = 16.0 / (PI * PI * (m * n) as f64 * self.stiffness(kappa));
                total += term(amp, alpha, beta) * sx * (beta * y).sin();
            }
        }
        total
    }

    fn check_static(&self, pressure: f64, point: (f64, f64), order: u32) -> Result<()> {
        if !(pressure >= 0.0 && pressure.is_finite()) {
            return Err(Error::Domain(format!("pressure must be >= 0, got {pressure}")));
        }
        if order == 0 {
            return Err(Error::Domain("series order must be >= 1".into()));
        }
        self.geometry.check_point(point)
    }

    /// Out-of-plane deflection (m) under uniform pressure (Pa).
    pub fn deflection(&self, pressure: f64, point: (f64, f64), order: u32) -> Result<SeriesValue> {
        self.check_static(pressure, point, order)?;
        let unit = self.navier_sum(point, order, |w, _, _| w);
        Ok(SeriesValue {
            value: pressure * unit,
            order,
        })
    }

    /// Surface bending stress difference `sigma_x - sigma_y` (Pa), with
    /// `sigma = 6 M / z^2` and `M_x = -D (w_xx + nu w_yy)`.
    pub fn stress_difference(&self, pressure: f64, point: (f64, f64), order: u32) -> Result<SeriesValue> {
        self.check_static(pressure, point, order)?;
        // w_xx - w_yy = -sum W (alpha^2 - beta^2) sin sin
        let curvature_diff = -self.navier_sum(point, order, |w, al, be| w * (al * al - be * be));
        let z = self.geometry.thickness;
        let moment_diff = -self.rigidity * (1.0 - self.material.poisson_ratio) * curvature_diff;
        Ok(SeriesValue {
            value: pressure * 6.0 * moment_diff / (z * z),
            order,
        })
    }
}

/// The `k` lowest modal frequencies, ascending.
pub fn modal_frequencies(
    geom: &MembraneGeometry,
    mat: &MaterialProps,
    stress: StressState,
    k: usize,
) -> Result<Vec<(ModeIndex, f64)>> {
    if k == 0 {
        return Err(Error::Domain("mode count must be >= 1".into()));
    }
    Ok(Plate::new(*geom, *mat, stress)?.modes(k))
}

/// Deflection at `point` using the default series order.
pub fn static_deflection(
    geom: &MembraneGeometry,
    mat: &MaterialProps,
    stress: StressState,
    pressure: f64,
    point: (f64, f64),
) -> Result<SeriesValue> {
    Plate::new(*geom, *mat, stress)?.deflection(pressure, point, DEFAULT_SERIES_ORDER)
}

pub fn surface_stress_difference(
    geom: &MembraneGeometry,
    mat: &MaterialProps,
    stress: StressState,
    pressure: f64,
    point: (f64, f64),
) -> Result<SeriesValue> {
    Plate::new(*geom, *mat, stress)?.stress_difference(pressure, point, DEFAULT_SERIES_ORDER)
}

/// Bridge output (V) for the given pressure.
pub fn bridge_voltage(
    geom: &MembraneGeometry,
    mat: &MaterialProps,
    stress: StressState,
    piezo: &PiezoModel,
    pressure: f64,
) -> Result<f64> {
    piezo.validate(geom)?;
    let ds = surface_stress_difference(geom, mat, stress, pressure, piezo.resistor_location)?;
    Ok(piezo.gain * piezo.supply_voltage * ds.value)
}

/// `sin(pi t)`, exactly zero for integer `t`.
fn sin_pi(t: f64) -> f64 {
    let r = t.rem_euclid(2.0);
    if r.fract() == 0.0 {
        0.0
    } else {
        (PI * r).sin()
    }
}

/// Normalized mode-shape amplitude `sin(m pi x / a) sin(n pi y / b)`.
pub fn mode_amplitude_at_point(mode: ModeIndex, geom: &MembraneGeometry, (x, y): (f64, f64)) -> f64 {
    sin_pi(mode.m as f64 * x / geom.side_a) * sin_pi(mode.n as f64 * y / geom.side_b)
}

/// Geometry, material and piezoresistor description of one sensor type.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorDesign {
    pub name: String,
    /// nominal geometry; `thickness` is the nominal membrane thickness
    pub geometry: MembraneGeometry,
    pub material: MaterialProps,
    pub nominal_stress: StressState,
    pub piezo: PiezoModel,
}

impl Default for SensorDesign {
    /// 1300 um square relative-pressure membrane, 15 um silicon under a
    /// 4 um passivation stack.
    fn default() -> Self {
        DesignFile::default().into()
    }
}

impl SensorDesign {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.material.validate()?;
        self.piezo.validate(&self.geometry)?;
        Plate::new(self.geometry, self.material, self.nominal_stress).map(|_| ())
    }

    pub fn plate(&self, thickness: f64, stress: f64) -> Result<Plate> {
        Plate::new(
            self.geometry.with_thickness(thickness),
            self.material,
            StressState::new(stress),
        )
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: DesignFile = serde_json::from_str(text).map_err(|e| Error::json(origin, &e))?;
        let design: SensorDesign = file.into();
        design.validate()?;
        Ok(design)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_file(&self) -> DesignFile {
        DesignFile {
            name: self.name.clone(),
            side_a_um: self.geometry.side_a / MICROMETRE,
            side_b_um: self.geometry.side_b / MICROMETRE,
            thickness_um: self.geometry.thickness / MICROMETRE,
            passivation_thickness_um: self.geometry.passivation_thickness / MICROMETRE,
            passivation_density_kg_m3: self.geometry.passivation_density,
            youngs_modulus_gpa: self.material.youngs_modulus / GIGAPASCAL,
            poisson_ratio: self.material.poisson_ratio,
            density_kg_m3: self.material.density,
            nominal_stress_mpa: self.nominal_stress.passivation_stress / MEGAPASCAL,
            piezo: PiezoFile {
                gain_per_pa: self.piezo.gain,
                supply_voltage_v: self.piezo.supply_voltage,
                resistor_x_um: self.piezo.resistor_location.0 / MICROMETRE,
                resistor_y_um: self.piezo.resistor_location.1 / MICROMETRE,
            },
        }
    }
}

/// On-disk design document; unit suffixes are part of the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignFile {
    pub name: String,
    pub side_a_um: f64,
    pub side_b_um: f64,
    pub thickness_um: f64,
    pub passivation_thickness_um: f64,
    pub passivation_density_kg_m3: f64,
    pub youngs_modulus_gpa: f64,
    pub poisson_ratio: f64,
    pub density_kg_m3: f64,
    pub nominal_stress_mpa: f64,
    pub piezo: PiezoFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiezoFile {
    pub gain_per_pa: f64,
    pub supply_voltage_v: f64,
    pub resistor_x_um: f64,
    pub resistor_y_um: f64,
}

impl Default for PiezoFile {
    fn default() -> Self {
        PiezoFile {
            // roughly pi_44 / 2 of p-type silicon
            gain_per_pa: 6.9e-10,
            supply_voltage_v: 5.0,
            resistor_x_um: 156.0,
            resistor_y_um: 650.0,
        }
    }
}

impl Default for DesignFile {
    fn default() -> Self {
        let si = MaterialProps::silicon();
        DesignFile {
            name: "relative-1300".into(),
            side_a_um: 1300.0,
            side_b_um: 1300.0,
            thickness_um: 15.0,
            passivation_thickness_um: 4.0,
            passivation_density_kg_m3: 2200.0,
            youngs_modulus_gpa: si.youngs_modulus / GIGAPASCAL,
            poisson_ratio: si.poisson_ratio,
            density_kg_m3: si.density,
            nominal_stress_mpa: 50.0,
            piezo: PiezoFile::default(),
        }
    }
}

impl From<DesignFile> for SensorDesign {
    fn from(f: DesignFile) -> Self {
        SensorDesign {
            name: f.name,
            geometry: MembraneGeometry {
                side_a: f.side_a_um * MICROMETRE,
                side_b: f.side_b_um * MICROMETRE,
                thickness: f.thickness_um * MICROMETRE,
                passivation_thickness: f.passivation_thickness_um * MICROMETRE,
                passivation_density: f.passivation_density_kg_m3,
            },
            material: MaterialProps {
                youngs_modulus: f.youngs_modulus_gpa * GIGAPASCAL,
                poisson_ratio: f.poisson_ratio,
                density: f.density_kg_m3,
            },
            nominal_stress: StressState::new(f.nominal_stress_mpa * MEGAPASCAL),
            piezo: PiezoModel {
                gain: f.piezo.gain_per_pa,
                supply_voltage: f.piezo.supply_voltage_v,
                resistor_location: (f.piezo.resistor_x_um * MICROMETRE, f.piezo.resistor_y_um * MICROMETRE),
            },
        }
    }
}

/// Forward-model grid over (thickness, stress). Mode positions are distinct
/// modal frequencies of the nominal design: degenerate modes such as (1,2)
/// and (2,1) on a square membrane share one position.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMatrix {
    z_grid: Vec<f64>,
    s_grid: Vec<f64>,
    mode_groups: Vec<Vec<ModeIndex>>,
    /// row-major `[z][s][mode]`
    frequencies: Vec<f64>,
}

fn check_ascending(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Domain(format!("{name} grid is empty")));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{name} grid has non-finite values")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain(format!("{name} grid must be strictly ascending")));
    }
    Ok(())
}

impl ParameterMatrix {
    /// Assembles a matrix from raw data, enforcing the structural invariants.
    pub fn from_parts(
        z_grid: Vec<f64>,
        s_grid: Vec<f64>,
        mode_groups: Vec<Vec<ModeIndex>>,
        frequencies: Vec<f64>,
    ) -> Result<Self> {
        check_ascending("thickness", &z_grid)?;
        check_ascending("stress", &s_grid)?;
        let k = mode_groups.len();
        if k == 0 || mode_groups.iter().any(|g| g.is_empty()) {
            return Err(Error::Domain("every mode position needs at least one mode".into()));
        }
        if frequencies.len() != z_grid.len() * s_grid.len() * k {
            return Err(Error::Domain(format!(
                "expected {} frequencies, got {}",
                z_grid.len() * s_grid.len() * k,
                frequencies.len()
            )));
        }
        for row in frequencies.chunks(k) {
            if row.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
                return Err(Error::Domain("frequencies must be finite and positive".into()));
            }
            if row.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Domain(
                    "frequencies must increase strictly along the mode axis".into(),
                ));
            }
        }
        Ok(ParameterMatrix {
            z_grid,
            s_grid,
            mode_groups,
            frequencies,
        })
    }

    pub fn z_grid(&self) -> &[f64] {
        &self.z_grid
    }

    pub fn s_grid(&self) -> &[f64] {
        &self.s_grid
    }

    pub fn mode_count(&self) -> usize {
        self.mode_groups.len()
    }

    pub fn mode_groups(&self) -> &[Vec<ModeIndex>] {
        &self.mode_groups
    }

    /// Number of varied parameters: axes with more than one grid point.
    pub fn param_count(&self) -> usize {
        (self.z_grid.len() > 1) as usize + (self.s_grid.len() > 1) as usize
    }

    pub fn frequencies_at(&self, iz: usize, is: usize) -> &[f64] {
        let k = self.mode_count();
        let start = (iz * self.s_grid.len() + is) * k;
        &self.frequencies[start..start + k]
    }

    pub fn frequency(&self, iz: usize, is: usize, mode: usize) -> f64 {
        self.frequencies_at(iz, is)[mode]
    }
}

/// Groups the lowest modes of `geom` by wavenumber; each group is one
/// distinct modal frequency.
pub fn distinct_mode_groups(geom: &MembraneGeometry, count: usize) -> Vec<Vec<ModeIndex>> {
    let bound = 2 * count as u32 + 2;
    let (a, b) = (geom.side_a, geom.side_b);
    let mut all: Vec<(ModeIndex, f64)> = (1..=bound)
        .flat_map(|m| (1..=bound).map(move |n| ModeIndex::new(m, n)))
        .map(|mode| {
            let al = mode.m as f64 * PI / a;
            let be = mode.n as f64 * PI / b;
            (mode, al * al + be * be)
        })
        .collect();
    all.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    let mut groups: Vec<(f64, Vec<ModeIndex>)> = Vec::new();
    for (mode, kappa) in all {
        match groups.last_mut() {
            Some((k0, g)) if (kappa - *k0).abs() <= 1e-12 * kappa => g.push(mode),
            _ => {
                if groups.len() == count {
                    break;
                }
                groups.push((kappa, vec![mode]));
            }
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

/// Runs the modal analysis over the (thickness, stress) grid. A single-point
/// axis is held fixed, which yields a one-parameter matrix.
pub fn build_parameter_matrix(
    design: &SensorDesign,
    z_grid: &[f64],
    s_grid: &[f64],
    mode_count: usize,
) -> Result<ParameterMatrix> {
    check_ascending("thickness", z_grid)?;
    check_ascending("stress", s_grid)?;
    let varied = [z_grid.len(), s_grid.len()]
        .into_iter()
        .filter(|&n| n > 1)
        .collect::<Vec<_>>();
    if varied.is_empty() {
        return Err(Error::Domain("at least one parameter axis must be varied".into()));
    }
    if varied.iter().any(|&n| n < 3) {
        return Err(Error::Domain("varied grids need at least 3 points".into()));
    }
    if mode_count < varied.len() + 1 {
        return Err(Error::Domain(format!(
            "mode count {mode_count} must exceed the parameter count {}",
            varied.len()
        )));
    }
    let groups = distinct_mode_groups(&design.geometry, mode_count);
    let mut frequencies = Vec::with_capacity(z_grid.len() * s_grid.len() * mode_count);
    for &z in z_grid {
        for &s in s_grid {
            let plate = design.plate(z, s)?;
            frequencies.extend(groups.iter().map(|g| plate.frequency(g[0])));
        }
    }
    ParameterMatrix::from_parts(z_grid.to_vec(), s_grid.to_vec(), groups, frequencies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square() -> (MembraneGeometry, MaterialProps) {
        let d = SensorDesign::default();
        (d.geometry, d.material)
    }

    fn bare(z: f64) -> MembraneGeometry {
        MembraneGeometry {
            side_a: 1300e-6,
            side_b: 1300e-6,
            thickness: z,
            passivation_thickness: 4e-6,
            passivation_density: 0.0,
        }
    }

    #[test]
    fn square_degenerate_pair_is_exact() {
        let (g, m) = square();
        let modes = modal_frequencies(&g, &m, StressState::new(50e6), 4).unwrap();
        assert_eq!(modes[1].0, ModeIndex::new(1, 2));
        assert_eq!(modes[2].0, ModeIndex::new(2, 1));
        assert_eq!(modes[1].1, modes[2].1);
    }

    #[test]
    fn bending_only_frequency_scales_with_thickness() {
        let m = MaterialProps::silicon();
        let f1 = modal_frequencies(&bare(10e-6), &m, StressState::default(), 6).unwrap();
        let f2 = modal_frequencies(&bare(20e-6), &m, StressState::default(), 6).unwrap();
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(a.0, b.0);
            assert_relative_eq!(b.1, 2.0 * a.1, max_relative = 1e-12);
        }
    }

    #[test]
    fn returns_exactly_k_ascending() {
        let (g, m) = square();
        let modes = modal_frequencies(&g, &m, StressState::new(50e6), 10).unwrap();
        assert_eq!(modes.len(), 10);
        assert!(modes.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(modal_frequencies(&g, &m, StressState::new(50e6), 0).is_err());
    }

    #[test]
    fn compressive_stress_past_buckling_is_rejected() {
        let (g, m) = square();
        let plate = Plate::new(g, m, StressState::default()).unwrap();
        let k11 = plate.wavenumber_sq(ModeIndex::new(1, 1));
        let critical_stress = -plate.flexural_rigidity() * k11 / g.passivation_thickness;
        let err = modal_frequencies(&g, &m, StressState::new(critical_stress * 1.01), 3);
        assert!(matches!(err, Err(Error::Buckling { .. })));
        assert!(modal_frequencies(&g, &m, StressState::new(critical_stress * 0.99), 3).is_ok());
    }

    #[test]
    fn degenerate_geometry_is_a_domain_error() {
        let (mut g, m) = square();
        g.side_b = 0.0;
        assert!(matches!(
            modal_frequencies(&g, &m, StressState::default(), 3),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn modes_below_matches_modes() {
        let (g, m) = square();
        let plate = Plate::new(g, m, StressState::new(50e6)).unwrap();
        let below = plate.modes_below(1e6);
        let first = plate.modes(below.len());
        assert_eq!(below, first);
        assert!(below.last().unwrap().1 <= 1e6);
    }

    #[test]
    fn zero_pressure_gives_zero_statics() {
        let (g, m) = square();
        let s = StressState::new(50e6);
        let p = (300e-6, 400e-6);
        assert_eq!(static_deflection(&g, &m, s, 0.0, p).unwrap().value, 0.0);
        assert_eq!(surface_stress_difference(&g, &m, s, 0.0, p).unwrap().value, 0.0);
    }

    #[test]
    fn statics_are_linear_in_pressure() {
        let (g, m) = square();
        let s = StressState::new(50e6);
        let p = (300e-6, 400e-6);
        let w1 = static_deflection(&g, &m, s, 1e4, p).unwrap();
        let w2 = static_deflection(&g, &m, s, 2e4, p).unwrap();
        assert_eq!(w1.order, DEFAULT_SERIES_ORDER);
        assert_relative_eq!(w2.value, 2.0 * w1.value, max_relative = 1e-14);
        assert!(w1.value > 0.0);
    }

    #[test]
    fn stress_difference_vanishes_at_center_and_is_antisymmetric() {
        let (g, m) = square();
        let s = StressState::new(50e6);
        let c = surface_stress_difference(&g, &m, s, 5e4, g.center()).unwrap();
        let scale = surface_stress_difference(&g, &m, s, 5e4, (200e-6, 650e-6))
            .unwrap()
            .value
            .abs();
        assert!(c.value.abs() <= 1e-10 * scale);
        let p = (210e-6, 530e-6);
        let a = surface_stress_difference(&g, &m, s, 5e4, p).unwrap().value;
        let b = surface_stress_difference(&g, &m, s, 5e4, (p.1, p.0)).unwrap().value;
        assert_relative_eq!(a, -b, max_relative = 1e-12);
    }

    #[test]
    fn statics_reject_bad_inputs() {
        let (g, m) = square();
        let s = StressState::default();
        assert!(static_deflection(&g, &m, s, -1.0, g.center()).is_err());
        assert!(static_deflection(&g, &m, s, 1.0, (0.0, 1e-4)).is_err());
        assert!(static_deflection(&g, &m, s, 1.0, (2e-3, 1e-4)).is_err());
    }

    #[test]
    fn bridge_voltage_basics() {
        let d = SensorDesign::default();
        let s = d.nominal_stress;
        let v0 = bridge_voltage(&d.geometry, &d.material, s, &d.piezo, 0.0).unwrap();
        assert_eq!(v0, 0.0);
        let v = bridge_voltage(&d.geometry, &d.material, s, &d.piezo, 3e4).unwrap();
        let p2 = d.piezo.with_gain(2.0 * d.piezo.gain);
        let v2 = bridge_voltage(&d.geometry, &d.material, s, &p2, 3e4).unwrap();
        assert_relative_eq!(v2, 2.0 * v, max_relative = 1e-14);
        let mut bad = d.piezo;
        bad.supply_voltage = 0.0;
        assert!(bridge_voltage(&d.geometry, &d.material, s, &bad, 1.0).is_err());
    }

    #[test]
    fn bridge_voltage_increases_over_sweep() {
        let d = SensorDesign::default();
        let volts: Vec<f64> = (0..=50)
            .map(|i| bridge_voltage(&d.geometry, &d.material, d.nominal_stress, &d.piezo, i as f64 * 1e3).unwrap())
            .collect();
        assert!(volts.windows(2).all(|w| w[1] > w[0]), "{volts:?}");
    }

    #[test]
    fn mode_amplitudes() {
        let (g, _) = square();
        let (a, b) = (g.side_a, g.side_b);
        assert_eq!(mode_amplitude_at_point(ModeIndex::new(1, 1), &g, g.center()), 1.0);
        assert_eq!(
            mode_amplitude_at_point(ModeIndex::new(2, 1), &g, (a / 2.0, 0.3 * b)),
            0.0
        );
        assert_relative_eq!(
            mode_amplitude_at_point(ModeIndex::new(1, 2), &g, (a / 4.0, b / 4.0)),
            std::f64::consts::FRAC_1_SQRT_2,
            max_relative = 1e-15
        );
    }

    #[test]
    fn design_file_roundtrip_and_rejects_unknown_fields() {
        let d = SensorDesign::default();
        let text = serde_json::to_string(&d.to_file()).unwrap();
        let back = SensorDesign::from_json(&text, Path::new("mem.json")).unwrap();
        assert_eq!(back.name, d.name);
        assert_relative_eq!(back.geometry.side_a, d.geometry.side_a, max_relative = 1e-15);
        let err = SensorDesign::from_json(r#"{"side_c_um": 3}"#, Path::new("x.json"));
        assert!(matches!(err, Err(Error::Json { .. })));
        let partial = SensorDesign::from_json(r#"{"thickness_um": 19}"#, Path::new("p.json")).unwrap();
        assert_relative_eq!(partial.geometry.thickness, 19e-6, max_relative = 1e-15);
    }

    #[test]
    fn square_design_collapses_degenerate_modes() {
        let (g, _) = square();
        let groups = distinct_mode_groups(&g, 5);
        assert_eq!(groups[0], vec![ModeIndex::new(1, 1)]);
        assert_eq!(groups[1], vec![ModeIndex::new(1, 2), ModeIndex::new(2, 1)]);
        assert_eq!(groups[2], vec![ModeIndex::new(2, 2)]);
        assert_eq!(groups[3], vec![ModeIndex::new(1, 3), ModeIndex::new(3, 1)]);
        assert_eq!(groups[4], vec![ModeIndex::new(2, 3), ModeIndex::new(3, 2)]);
    }

    #[test]
    fn parameter_matrix_matches_direct_modal_calls() {
        let d = SensorDesign::default();
        let z = [14e-6, 15e-6, 16e-6];
        let s = [25e6, 50e6, 75e6];
        let pm = build_parameter_matrix(&d, &z, &s, 4).unwrap();
        assert_eq!(pm.param_count(), 2);
        let direct = modal_frequencies(
            &d.geometry.with_thickness(15e-6),
            &d.material,
            StressState::new(50e6),
            6,
        )
        .unwrap();
        let distinct = [direct[0].1, direct[1].1, direct[3].1, direct[4].1];
        assert_eq!(pm.frequencies_at(1, 1), &distinct);
    }

    #[test]
    fn parameter_matrix_monotone_in_both_parameters() {
        let d = SensorDesign::default();
        let z = crate::units::linspace(12e-6, 18e-6, 7);
        let s = crate::units::linspace(0.0, 100e6, 6);
        let pm = build_parameter_matrix(&d, &z, &s, 5).unwrap();
        for k in 0..5 {
            for iz in 0..z.len() {
                for is in 1..s.len() {
                    assert!(pm.frequency(iz, is, k) > pm.frequency(iz, is - 1, k));
                }
            }
            for is in 0..s.len() {
                for iz in 1..z.len() {
                    assert!(pm.frequency(iz, is, k) > pm.frequency(iz - 1, is, k));
                }
            }
        }
    }

    #[test]
    fn parameter_matrix_reports_buckling_point() {
        let d = SensorDesign::default();
        let err = build_parameter_matrix(&d, &[10e-6, 12e-6, 14e-6], &[-2e9, 0.0, 50e6], 3);
        match err {
            Err(Error::Buckling { thickness, stress, .. }) => {
                assert_eq!(thickness, 10e-6);
                assert_eq!(stress, -2e9);
            }
            other => panic!("expected buckling, got {other:?}"),
        }
    }

    #[test]
    fn parameter_matrix_rejects_bad_grids() {
        let d = SensorDesign::default();
        assert!(build_parameter_matrix(&d, &[1e-5, 2e-5], &[0.0, 1e6, 2e6], 3).is_err());
        assert!(build_parameter_matrix(&d, &[2e-5, 1e-5, 3e-5], &[0.0], 3).is_err());
        assert!(build_parameter_matrix(&d, &[1e-5, 2e-5, 3e-5], &[0.0, 1e6, 2e6], 2).is_err());
        assert!(build_parameter_matrix(&d, &[1e-5], &[0.0], 3).is_err());
        let one = build_parameter_matrix(&d, &[1e-5, 2e-5, 3e-5], &[5e7], 3).unwrap();
        assert_eq!(one.param_count(), 1);
    }
}
