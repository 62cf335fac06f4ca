//! Wafer-level runs: die truths from a wafer spec, characterization on a
//! calibration subset, thickness-only wafer test on every die, reports.
//!
//! Every die derives its own random streams from `(wafer_seed, row, col)`,
//! so a die's row does not depend on which other dies are on the wafer, and
//! parallel and serial runs give identical reports.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identify::{
    assign_and_identify, characterize, CharacterizationConfig, CharacterizationReport, Classification, IdentMode,
    IdentificationConfig, IdentificationResult, ParameterLimit,
};
use crate::peak_detect::{detect, PeakConfig};
use crate::plate_model::{build_parameter_matrix, DesignFile, SensorDesign, StressState};
use crate::response_synth::{derive_seed, synthesize, AcquisitionSpec, DefectSpec, DieTruth, FrequencyResponse};
use crate::static_correlate::{adapt_gain, sweep, CorrelationReport, StaticConfig, StaticSweep};
use crate::surrogate::{fit_inverse, InverseSurrogate, Parameter, DEFAULT_MAX_DEGREE};
use crate::units::{MEGAPASCAL, MICROMETRE};

/// Sub-stream keys below the per-die seed.
const STREAM_THICKNESS: u64 = 1;
const STREAM_DEFECT: u64 = 2;
const STREAM_SPECTRUM: u64 = 3;
const STREAM_STATIC: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DesignRef {
    Path(PathBuf),
    Inline(DesignFile),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rows: u32,
    pub cols: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalDist {
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DieOverride {
    pub die: String,
    #[serde(default)]
    pub thickness_um: Option<f64>,
    #[serde(default)]
    pub stress_mpa: Option<f64>,
    #[serde(default)]
    pub defect: Option<DefectSpec>,
}

/// Per-die probabilities of random defects on dies without an override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomDefects {
    pub no_membrane_fraction: f64,
    pub asymmetry_fraction: f64,
    pub asymmetry_ratio: f64,
}

impl Default for RandomDefects {
    fn default() -> Self {
        RandomDefects {
            no_membrane_fraction: 0.0,
            asymmetry_fraction: 0.0,
            asymmetry_ratio: 0.02,
        }
    }
}

/// Identification limits and mode counts in file units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentificationSettings {
    pub characterization_modes: usize,
    pub wafer_test_modes: usize,
    pub max_eie_um: f64,
    pub max_eie_n: f64,
    pub max_stress_eie_mpa: f64,
    pub max_stress_eie_n: f64,
    /// defaults to the surrogate's training range
    pub thickness_range_um: Option<(f64, f64)>,
    pub stress_range_mpa: Option<(f64, f64)>,
    pub degenerate_split_tolerance: f64,
    pub window_margin: f64,
    pub feasibility_margin: f64,
}

impl Default for IdentificationSettings {
    fn default() -> Self {
        let z = ParameterLimit::default_for(Parameter::Thickness, (0.0, 1.0));
        let s = ParameterLimit::default_for(Parameter::Stress, (0.0, 1.0));
        IdentificationSettings {
            characterization_modes: 4,
            wafer_test_modes: 3,
            max_eie_um: z.max_eie / MICROMETRE,
            max_eie_n: z.max_eie_n,
            max_stress_eie_mpa: s.max_eie / MEGAPASCAL,
            max_stress_eie_n: s.max_eie_n,
            thickness_range_um: None,
            stress_range_mpa: None,
            degenerate_split_tolerance: 5e-3,
            window_margin: 0.1,
            feasibility_margin: 0.5,
        }
    }
}

impl IdentificationSettings {
    /// Configuration for `surrogate` with these limits applied.
    pub fn config_for(&self, surrogate: &InverseSurrogate, mode: IdentMode) -> IdentificationConfig {
        let mut cfg = IdentificationConfig::for_surrogate(surrogate, mode);
        for l in cfg.limits.iter_mut() {
            match l.parameter {
                Parameter::Thickness => {
                    l.max_eie = self.max_eie_um * MICROMETRE;
                    l.max_eie_n = self.max_eie_n;
                    if let Some((a, b)) = self.thickness_range_um {
                        l.range = (a * MICROMETRE, b * MICROMETRE);
                    }
                }
                Parameter::Stress => {
                    l.max_eie = self.max_stress_eie_mpa * MEGAPASCAL;
                    l.max_eie_n = self.max_stress_eie_n;
                    if let Some((a, b)) = self.stress_range_mpa {
                        l.range = (a * MEGAPASCAL, b * MEGAPASCAL);
                    }
                }
            }
        }
        cfg.degenerate_split_tolerance = self.degenerate_split_tolerance;
        cfg.window_margin = self.window_margin;
        cfg.feasibility_margin = self.feasibility_margin;
        cfg
    }

    fn validate(&self) -> Result<()> {
        if self.characterization_modes < 3 || self.wafer_test_modes < 2 {
            return Err(Error::Config(
                "identification: need >= 3 characterization modes and >= 2 wafer-test modes".into(),
            ));
        }
        let positive = [
            self.max_eie_um,
            self.max_eie_n,
            self.max_stress_eie_mpa,
            self.max_stress_eie_n,
            self.degenerate_split_tolerance,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.window_margin < 0.0 || self.feasibility_margin < 0.0 {
            return Err(Error::Config("identification: limits must be positive".into()));
        }
        for (name, r) in [
            ("thickness", self.thickness_range_um),
            ("stress", self.stress_range_mpa),
        ] {
            if let Some((a, b)) = r {
                if !(a < b) {
                    return Err(Error::Config(format!("identification: {name} range is empty")));
                }
            }
        }
        Ok(())
    }
}

/// Wafer spec document as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaferSpecFile {
    #[serde(default = "default_design_ref")]
    pub design: DesignRef,
    pub grid: GridSpec,
    pub wafer_seed: u64,
    #[serde(default = "default_thickness")]
    pub thickness_um: NormalDist,
    #[serde(default = "default_stress")]
    pub stress_mpa: f64,
    #[serde(default)]
    pub overrides: Vec<DieOverride>,
    #[serde(default)]
    pub random_defects: RandomDefects,
    #[serde(default)]
    pub exclude: Vec<String>,
    /// dies used for characterization; empty picks dies spread over the wafer
    #[serde(default)]
    pub calibration_dies: Vec<String>,
    #[serde(default)]
    pub acquisition: AcquisitionSpec,
    #[serde(default)]
    pub peaks: PeakConfig,
    #[serde(default)]
    pub identification: IdentificationSettings,
    #[serde(default)]
    pub characterization: CharacterizationConfig,
    #[serde(default, rename = "static")]
    pub static_test: StaticConfig,
}

fn default_design_ref() -> DesignRef {
    DesignRef::Inline(DesignFile::default())
}

fn default_thickness() -> NormalDist {
    NormalDist {
        mean: 15.0,
        sigma: 0.15,
    }
}

fn default_stress() -> f64 {
    50.0
}

impl WaferSpecFile {
    /// Minimal spec on the default design.
    pub fn new(rows: u32, cols: u32, wafer_seed: u64) -> Self {
        WaferSpecFile {
            design: default_design_ref(),
            grid: GridSpec { rows, cols },
            wafer_seed,
            thickness_um: default_thickness(),
            stress_mpa: default_stress(),
            overrides: Vec::new(),
            random_defects: RandomDefects::default(),
            exclude: Vec::new(),
            calibration_dies: Vec::new(),
            acquisition: AcquisitionSpec::default(),
            peaks: PeakConfig::default(),
            identification: IdentificationSettings::default(),
            characterization: CharacterizationConfig::default(),
            static_test: StaticConfig::default(),
        }
    }
}

/// One die position; `row` and `col` are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DieSite {
    pub row: u32,
    pub col: u32,
}

impl DieSite {
    pub fn id(&self) -> String {
        format!("R{}C{}", self.row, self.col)
    }

    /// Parses `R<row>C<col>`.
    pub fn parse(id: &str) -> Result<Self> {
        let bad = || Error::Config(format!("die id {id:?} is not of the form R<row>C<col>"));
        let rest = id.trim().strip_prefix(['R', 'r']).ok_or_else(bad)?;
        let (r, c) = rest.split_once(['C', 'c']).ok_or_else(bad)?;
        let row: u32 = r.parse().map_err(|_| bad())?;
        let col: u32 = c.parse().map_err(|_| bad())?;
        if row == 0 || col == 0 {
            return Err(bad());
        }
        Ok(DieSite { row, col })
    }
}

/// Validated wafer spec.
#[derive(Debug, Clone, PartialEq)]
pub struct WaferSpec {
    pub file: WaferSpecFile,
    pub design: SensorDesign,
    overrides: BTreeMap<DieSite, DieOverride>,
    sites: Vec<DieSite>,
}

impl WaferSpec {
    /// Validates a spec; relative design paths resolve against `base_dir`.
    pub fn from_file(file: WaferSpecFile, base_dir: &Path) -> Result<Self> {
        let design = match &file.design {
            DesignRef::Inline(d) => {
                let d: SensorDesign = d.clone().into();
                d.validate()?;
                d
            }
            DesignRef::Path(p) => SensorDesign::load(&base_dir.join(p))?,
        };
        let GridSpec { rows, cols } = file.grid;
        if rows == 0 || cols == 0 {
            return Err(Error::Config("grid must have at least one row and one column".into()));
        }
        let in_grid = |id: &str| -> Result<DieSite> {
            let s = DieSite::parse(id)?;
            if s.row > rows || s.col > cols {
                return Err(Error::Config(format!("die {id} lies outside the {rows} x {cols} grid")));
            }
            Ok(s)
        };
        let t = file.thickness_um;
        if !(t.mean > 0.0 && t.mean.is_finite() && t.sigma >= 0.0 && t.sigma.is_finite()) {
            return Err(Error::Config(
                "thickness distribution needs mean > 0 and sigma >= 0".into(),
            ));
        }
        if !file.stress_mpa.is_finite() {
            return Err(Error::Config("stress must be finite".into()));
        }
        let rd = file.random_defects;
        let fractions_ok = rd.no_membrane_fraction >= 0.0
            && rd.asymmetry_fraction >= 0.0
            && rd.no_membrane_fraction + rd.asymmetry_fraction <= 1.0;
        if !fractions_ok {
            return Err(Error::Config(
                "random defect fractions must be >= 0 and sum to <= 1".into(),
            ));
        }
        DefectSpec::Asymmetry {
            ratio: rd.asymmetry_ratio,
        }
        .validate()?;

        let mut overrides = BTreeMap::new();
        for o in &file.overrides {
            let site = in_grid(&o.die)?;
            if let Some(z) = o.thickness_um {
                if !(z > 0.0 && z.is_finite()) {
                    return Err(Error::Config(format!("override {}: thickness must be positive", o.die)));
                }
            }
            if let Some(d) = o.defect {
                d.validate()?;
            }
            if overrides.insert(site, o.clone()).is_some() {
                return Err(Error::Config(format!("die {} is overridden twice", o.die)));
            }
        }
        let excluded: HashSet<DieSite> = file.exclude.iter().map(|id| in_grid(id)).collect::<Result<_>>()?;
        for id in &file.calibration_dies {
            if excluded.contains(&in_grid(id)?) {
                return Err(Error::Config(format!("calibration die {id} is excluded")));
            }
        }
        file.acquisition.validate()?;
        file.identification.validate()?;
        file.static_test.validate()?;
        if file.peaks.min_snr <= 1.0 || file.peaks.min_separation_hz < file.acquisition.bin_width() {
            return Err(Error::Config(
                "peaks: min_snr must exceed 1 and min_separation_hz must cover one bin".into(),
            ));
        }
        let sites = (1..=rows)
            .flat_map(|row| (1..=cols).map(move |col| DieSite { row, col }))
            .filter(|s| !excluded.contains(s))
            .collect();
        Ok(WaferSpec {
            file,
            design,
            overrides,
            sites,
        })
    }

    pub fn from_json(text: &str, base_dir: &Path, origin: &Path) -> Result<Self> {
        let file: WaferSpecFile = serde_json::from_str(text).map_err(|e| Error::json(origin, &e))?;
        Self::from_file(file, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base, path)
    }

    /// Dies on the wafer in row-major order.
    pub fn sites(&self) -> &[DieSite] {
        &self.sites
    }

    pub fn site(&self, id: &str) -> Result<DieSite> {
        let s = DieSite::parse(id)?;
        if self.sites.contains(&s) {
            Ok(s)
        } else {
            Err(Error::Config(format!("die {id} is not on the wafer")))
        }
    }

    pub fn die_seed(&self, site: DieSite) -> u64 {
        derive_seed(self.file.wafer_seed, &[site.row as u64, site.col as u64])
    }

    /// Ground truth of a die.
    pub fn truth(&self, site: DieSite) -> DieTruth {
        let seed = self.die_seed(site);
        let o = self.overrides.get(&site);
        let t = self.file.thickness_um;
        let thickness_um = o.and_then(|o| o.thickness_um).unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_THICKNESS]));
            let n: f64 = StandardNormal.sample(&mut rng);
            t.mean + t.sigma * n
        });
        let stress_mpa = o.and_then(|o| o.stress_mpa).unwrap_or(self.file.stress_mpa);
        let defect = o.and_then(|o| o.defect).unwrap_or_else(|| {
            let rd = self.file.random_defects;
            let u: f64 = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_DEFECT])).random();
            if u < rd.no_membrane_fraction {
                DefectSpec::NoMembrane
            } else if u < rd.no_membrane_fraction + rd.asymmetry_fraction {
                DefectSpec::Asymmetry {
                    ratio: rd.asymmetry_ratio,
                }
            } else {
                DefectSpec::None
            }
        });
        DieTruth {
            geometry: self.design.geometry.with_thickness(thickness_um * MICROMETRE),
            material: self.design.material,
            stress: StressState::new(stress_mpa * MEGAPASCAL),
            defect,
            rng_seed: derive_seed(seed, &[STREAM_SPECTRUM]),
        }
    }

    /// Simulated spectrum of one die.
    pub fn simulate(&self, site: DieSite) -> Result<FrequencyResponse> {
        synthesize(&self.truth(site), &self.file.acquisition)
    }

    /// Calibration dies: the listed ones, or `count` dies spread evenly over
    /// the wafer in row-major order.
    pub fn calibration_sites(&self, count: usize) -> Result<Vec<DieSite>> {
        if !self.file.calibration_dies.is_empty() {
            return self.file.calibration_dies.iter().map(|id| self.site(id)).collect();
        }
        let n = self.sites.len();
        if count == 0 || count > n {
            return Err(Error::InsufficientData(format!(
                "cannot pick {count} calibration dies from {n} dies"
            )));
        }
        Ok((0..count).map(|i| self.sites[i * n / count]).collect())
    }

    /// Static sweep and gain adaptation of a die at identified parameters.
    pub fn static_correlate(&self, site: DieSite, identified: (f64, f64)) -> Result<(StaticSweep, CorrelationReport)> {
        let st = &self.file.static_test;
        let noise = (st.noise > 0.0).then(|| (st.noise, derive_seed(self.die_seed(site), &[STREAM_STATIC])));
        let s = sweep(&self.truth(site), &self.design.piezo, &st.pressures(), noise)?;
        let r = adapt_gain(&s, identified, &self.design)?;
        Ok((s, r))
    }
}

#[cfg(feature = "parallel")]
fn map_sites<T: Send>(sites: &[DieSite], f: impl Fn(DieSite) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    sites.par_iter().map(|&s| f(s)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_sites<T>(sites: &[DieSite], f: impl Fn(DieSite) -> T) -> Vec<T> {
    sites.iter().map(|&s| f(s)).collect()
}

/// Stored result of the characterization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub calibrated_stress_mpa: f64,
    pub recommended_max_eie_um: Option<f64>,
    pub recommended_max_stress_eie_mpa: Option<f64>,
    pub dies_used: usize,
    pub valid_dies: usize,
    pub dies: Vec<String>,
}

impl Calibration {
    pub fn from_report(r: &CharacterizationReport, dies: Vec<String>) -> Self {
        let pick = |p: Parameter| r.recommended_max_eie.iter().find(|(q, _)| *q == p).map(|x| x.1);
        Calibration {
            calibrated_stress_mpa: r.calibrated_stress / MEGAPASCAL,
            recommended_max_eie_um: pick(Parameter::Thickness).map(|v| v / MICROMETRE),
            recommended_max_stress_eie_mpa: pick(Parameter::Stress).map(|v| v / MEGAPASCAL),
            dies_used: r.dies_used,
            valid_dies: r.valid_dies,
            dies,
        }
    }

    pub fn stress(&self) -> f64 {
        self.calibrated_stress_mpa * MEGAPASCAL
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("calibration serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Calibration = serde_json::from_str(&text).map_err(|e| Error::json(path, &e))?;
        if !c.calibrated_stress_mpa.is_finite() {
            return Err(Error::Config(format!(
                "{}: calibrated stress must be finite",
                path.display()
            )));
        }
        Ok(c)
    }
}

/// Runs synthesis, peak detection and identification on one die.
pub fn identify_die(
    spec: &WaferSpec,
    site: DieSite,
    surrogate: &InverseSurrogate,
    cfg: &IdentificationConfig,
) -> Result<(usize, IdentificationResult)> {
    let resp = spec.simulate(site)?;
    let peaks = detect(&resp, &spec.file.peaks);
    Ok((peaks.len(), assign_and_identify(&peaks, surrogate, cfg)?))
}

/// Characterization mode: two-parameter identification on the calibration
/// dies, median stress and recommended EIE limits.
pub fn run_characterization(spec: &WaferSpec, surrogate: &InverseSurrogate, dies: usize) -> Result<Calibration> {
    if surrogate.param_count() != 2 {
        return Err(Error::Mismatch(
            "characterization needs a thickness/stress surrogate".into(),
        ));
    }
    if surrogate.mode_count() != spec.file.identification.characterization_modes {
        return Err(Error::Mismatch(format!(
            "surrogate covers {} modes, spec asks for {}",
            surrogate.mode_count(),
            spec.file.identification.characterization_modes
        )));
    }
    let cfg = spec
        .file
        .identification
        .config_for(surrogate, IdentMode::Characterization);
    let sites = spec.calibration_sites(dies)?;
    let results: Vec<IdentificationResult> = map_sites(&sites, |s| identify_die(spec, s, surrogate, &cfg))
        .into_iter()
        .filter_map(|r| r.ok().map(|(_, r)| r))
        .collect();
    let report = characterize(&results, &spec.file.characterization)?;
    Ok(Calibration::from_report(
        &report,
        sites.iter().map(DieSite::id).collect(),
    ))
}

/// Thickness-only surrogate at the calibrated stress. A surrogate that
/// already identifies thickness alone is returned unchanged.
pub fn wafer_test_surrogate(spec: &WaferSpec, surrogate: &InverseSurrogate, stress: f64) -> Result<InverseSurrogate> {
    if surrogate.parameters == [Parameter::Thickness] {
        return Ok(surrogate.clone());
    }
    if !surrogate.parameters.contains(&Parameter::Thickness) {
        return Err(Error::Mismatch("surrogate does not identify thickness".into()));
    }
    let pm = build_parameter_matrix(
        &spec.design,
        &surrogate.z_grid,
        &[stress],
        spec.file.identification.wafer_test_modes,
    )?;
    Ok(fit_inverse(&pm, surrogate.accuracy, DEFAULT_MAX_DEGREE)?.surrogate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DieTruthRecord {
    pub thickness_um: f64,
    pub stress_mpa: f64,
    pub defect: DefectSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DieRow {
    pub die_id: String,
    pub row: u32,
    pub col: u32,
    pub status: String,
    pub thickness_um: Option<f64>,
    pub stress_mpa: Option<f64>,
    pub eie_um: Option<f64>,
    pub eie_n: Option<f64>,
    pub n_peaks: usize,
    pub static_max_err: Option<f64>,
    pub message: Option<String>,
    pub truth: DieTruthRecord,
}

pub const STATUS_ERROR: &str = "error";

pub const CSV_HEADER: [&str; 10] = [
    "die_id",
    "row",
    "col",
    "status",
    "thickness_um",
    "stress_MPa",
    "eie_um",
    "eie_n",
    "n_peaks",
    "static_max_err",
];

const STATUSES: [&str; 5] = [
    "valid",
    "type1_no_membrane",
    "type2_asymmetric",
    "out_of_range",
    STATUS_ERROR,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaferSummary {
    pub counts: BTreeMap<String, usize>,
    pub thickness_mean_um: Option<f64>,
    pub thickness_std_um: Option<f64>,
    /// clean dies not reported valid
    pub false_positives: usize,
    /// defective dies reported valid
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaferReport {
    pub design: String,
    pub wafer_seed: u64,
    pub calibrated_stress_mpa: f64,
    pub rows: Vec<DieRow>,
    pub summary: WaferSummary,
}

fn test_die(
    spec: &WaferSpec,
    site: DieSite,
    surrogate: &InverseSurrogate,
    cfg: &IdentificationConfig,
    stress: f64,
) -> DieRow {
    let truth = spec.truth(site);
    let mut row = DieRow {
        die_id: site.id(),
        row: site.row,
        col: site.col,
        status: STATUS_ERROR.into(),
        thickness_um: None,
        stress_mpa: None,
        eie_um: None,
        eie_n: None,
        n_peaks: 0,
        static_max_err: None,
        message: None,
        truth: DieTruthRecord {
            thickness_um: truth.geometry.thickness / MICROMETRE,
            stress_mpa: truth.stress.passivation_stress / MEGAPASCAL,
            defect: truth.defect,
        },
    };
    let (n_peaks, result) = match identify_die(spec, site, surrogate, cfg) {
        Ok(x) => x,
        Err(e) => {
            row.message = Some(e.to_string());
            return row;
        }
    };
    row.n_peaks = n_peaks;
    row.status = result.classification.as_str().into();
    if let Some(z) = result.param(Parameter::Thickness) {
        row.thickness_um = Some(z / MICROMETRE);
        row.stress_mpa = Some(result.param(Parameter::Stress).unwrap_or(stress) / MEGAPASCAL);
        if let Some((e, n)) = result.eie_of(Parameter::Thickness) {
            row.eie_um = Some(e / MICROMETRE);
            row.eie_n = n;
        }
    }
    if spec.file.static_test.enabled && result.classification == Classification::Valid {
        let z = result
            .param(Parameter::Thickness)
            .expect("valid dies carry a thickness");
        match spec.static_correlate(site, (z, stress)) {
            Ok((_, r)) => row.static_max_err = Some(r.max_rel_voltage_error),
            Err(e) => row.message = Some(format!("static correlation: {e}")),
        }
    }
    row
}

fn summarize(rows: &[DieRow]) -> WaferSummary {
    let mut counts: BTreeMap<String, usize> = STATUSES.iter().map(|s| (s.to_string(), 0)).collect();
    for r in rows {
        *counts.entry(r.status.clone()).or_default() += 1;
    }
    let z: Vec<f64> = rows
        .iter()
        .filter(|r| r.status == "valid")
        .filter_map(|r| r.thickness_um)
        .collect();
    let (mean, std) = if z.is_empty() {
        (None, None)
    } else {
        let m = z.iter().sum::<f64>() / z.len() as f64;
        let var = if z.len() > 1 {
            z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (z.len() - 1) as f64
        } else {
            0.0
        };
        (Some(m), Some(var.sqrt()))
    };
    let clean = |r: &&DieRow| !r.truth.defect.is_defect();
    WaferSummary {
        counts,
        thickness_mean_um: mean,
        thickness_std_um: std,
        false_positives: rows.iter().filter(clean).filter(|r| r.status != "valid").count(),
        false_negatives: rows
            .iter()
            .filter(|r| r.truth.defect.is_defect() && r.status == "valid")
            .count(),
    }
}

/// Wafer-test mode on every die. `surrogate` is either a thickness-only
/// surrogate or the characterization surrogate, from which a thickness-only
/// one is fitted at the calibrated stress.
pub fn run_wafer(spec: &WaferSpec, surrogate: &InverseSurrogate, calibration: &Calibration) -> Result<WaferReport> {
    let stress = calibration.stress();
    let ws = wafer_test_surrogate(spec, surrogate, stress)?;
    let cfg = spec.file.identification.config_for(&ws, IdentMode::WaferTest);
    cfg.validate()?;
    let rows = map_sites(spec.sites(), |s| test_die(spec, s, &ws, &cfg, stress));
    let summary = summarize(&rows);
    Ok(WaferReport {
        design: spec.design.name.clone(),
        wafer_seed: spec.file.wafer_seed,
        calibrated_stress_mpa: calibration.calibrated_stress_mpa,
        rows,
        summary,
    })
}

/// Formats with `sig` significant digits in fixed notation.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { x.to_string() };
    }
    let mag = x.abs().log10().floor() as i64;
    let decimals = (sig as i64 - 1 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format_sig(v, 9)).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl WaferReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.die_id.clone(),
                r.row.to_string(),
                r.col.to_string(),
                r.status.clone(),
                opt(r.thickness_um),
                opt(r.stress_mpa),
                opt(r.eie_um),
                opt(r.eie_n),
                r.n_peaks.to_string(),
                opt(r.static_max_err),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(origin, &e))
    }
}

pub fn export_report(report: &WaferReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv_string(),
        ReportFormat::Json => report.to_json(),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Row of a report CSV as needed downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportCsvRow {
    pub die_id: String,
    pub status: String,
    pub thickness_um: Option<f64>,
    pub stress_mpa: Option<f64>,
}

/// Reads the die id, status and identified parameters back from a report CSV.
pub fn read_report_csv(path: &Path) -> Result<Vec<ReportCsvRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Config(format!(
            "{}: not a wafer report (unexpected header)",
            path.display()
        )));
    }
    let num = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{}:{line}: {s:?} is not a number", path.display())))
    };
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        rows.push(ReportCsvRow {
            die_id: rec[0].to_string(),
            status: rec[3].to_string(),
            thickness_um: num(&rec[4], line)?,
            stress_mpa: num(&rec[5], line)?,
        });
    }
    Ok(rows)
}
