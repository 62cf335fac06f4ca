use std::path::Path;
use std::sync::OnceLock;

use proptest::prelude::*;

use membrane_ident::identify::{
    assign_and_identify, classify, eie, limits_exceeded, Classification, IdentMode, IdentificationConfig,
};
use membrane_ident::peak_detect::{find_peaks, refine_lorentzian, Peak};
use membrane_ident::plate_model::{
    build_parameter_matrix, modal_frequencies, MaterialProps, MembraneGeometry, SensorDesign, StressState,
};
use membrane_ident::response_synth::{
    placed_modes, synthesize, AcquisitionSpec, DefectSpec, DieTruth, FrequencyResponse,
};
use membrane_ident::static_correlate::{adapt_gain, sweep, StaticConfig, StaticSweep};
use membrane_ident::surrogate::{default_s_grid, default_z_grid, fit_inverse, InverseSurrogate, Parameter};
use membrane_ident::units::{linspace, BAR};
use membrane_ident::wafer::{run_wafer, Calibration, WaferSpec, WaferSpecFile};

fn surrogate() -> &'static InverseSurrogate {
    static S: OnceLock<InverseSurrogate> = OnceLock::new();
    S.get_or_init(|| {
        let pm = build_parameter_matrix(&SensorDesign::default(), &default_z_grid(), &default_s_grid(), 4).unwrap();
        fit_inverse(&pm, 1e-3, 6).unwrap().surrogate
    })
}

fn peak(f: f64) -> Peak {
    Peak {
        frequency: f,
        amplitude: 1.0,
        width: 0.0,
        refined: false,
        bin: 0,
    }
}

fn truth(z: f64, s: f64, seed: u64) -> DieTruth {
    let d = SensorDesign::default();
    DieTruth {
        geometry: d.geometry.with_thickness(z),
        material: d.material,
        stress: StressState::new(s),
        defect: DefectSpec::None,
        rng_seed: seed,
    }
}

fn spectrum(lines: &[(f64, f64, f64)], noise: &[f64]) -> FrequencyResponse {
    let freqs = linspace(1e5, 2e5, noise.len());
    let amp = freqs
        .iter()
        .zip(noise)
        .map(|(&f, &n)| {
            n + lines
                .iter()
                .map(|&(a, f0, g)| a / (1.0 + ((f - f0) / g).powi(2)))
                .sum::<f64>()
        })
        .collect();
    FrequencyResponse {
        freqs,
        amplitude: vec![amp],
    }
}

fn lines_strategy() -> impl Strategy<Value = (Vec<(f64, f64, f64)>, Vec<f64>)> {
    (
        prop::collection::vec((0.05f64..1.0, 1.0e5f64..2.0e5, 50.0f64..600.0), 0..8),
        prop::collection::vec(0.0f64..1e-3, 1024),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn modal_frequencies_exact_count_ascending(
        a in 500e-6f64..2000e-6, b in 500e-6f64..2000e-6, z in 5e-6f64..30e-6,
        s in 0.0f64..200e6, k in 1usize..12,
    ) {
        let geom = MembraneGeometry { side_a: a, side_b: b, thickness: z, ..SensorDesign::default().geometry };
        let m = modal_frequencies(&geom, &MaterialProps::silicon(), StressState::new(s), k).unwrap();
        prop_assert_eq!(m.len(), k);
        prop_assert!(m.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn parameter_matrix_strictly_increasing_over_modes(
        z0 in 8e-6f64..20e-6, dz in 0.1e-6f64..1e-6, s0 in 0.0f64..80e6, ds in 1e6f64..10e6,
        nz in 3usize..6, ns in 3usize..6, k in 3usize..7,
    ) {
        let zg: Vec<f64> = (0..nz).map(|i| z0 + dz * i as f64).collect();
        let sg: Vec<f64> = (0..ns).map(|i| s0 + ds * i as f64).collect();
        let pm = build_parameter_matrix(&SensorDesign::default(), &zg, &sg, k).unwrap();
        for iz in 0..nz {
            for is in 0..ns {
                let f = pm.frequencies_at(iz, is);
                prop_assert!(f.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn pure_bending_frequencies_grow_with_thickness(z0 in 5e-6f64..20e-6, dz in 0.1e-6f64..2e-6) {
        let zg: Vec<f64> = (0..4).map(|i| z0 + dz * i as f64).collect();
        let pm = build_parameter_matrix(&SensorDesign::default(), &zg, &[0.0], 4).unwrap();
        for m in 0..4 {
            prop_assert!((1..4).all(|i| pm.frequency(i, 0, m) > pm.frequency(i - 1, 0, m)));
        }
    }

    #[test]
    fn statics_scale_linearly(p in 1.0f64..7e5, c in 0.01f64..10.0, x in 0.05f64..0.95, y in 0.05f64..0.95) {
        let d = SensorDesign::default();
        let plate = d.plate(15e-6, 50e6).unwrap();
        let pt = (x * 1300e-6, y * 1300e-6);
        let w1 = plate.deflection(p, pt, 99).unwrap().value;
        let w2 = plate.deflection(c * p, pt, 99).unwrap().value;
        prop_assert!((w2 - c * w1).abs() <= 1e-12 * w2.abs().max(1e-30));
    }

    #[test]
    fn surrogate_json_round_trip_evaluates_identically(f in prop::collection::vec(5e4f64..4e5, 4)) {
        let s = surrogate();
        let back = InverseSurrogate::from_json(&s.to_json(), Path::new("mem")).unwrap();
        prop_assert_eq!(&back, s);
        let mut f = f;
        f.sort_by(f64::total_cmp);
        for (a, b) in s.evaluate_all(&f).iter().zip(back.evaluate_all(&f)) {
            prop_assert_eq!(&a.params, &b.params);
        }
    }

    #[test]
    fn synthesis_is_deterministic(seed in any::<u64>(), z in 14e-6f64..16e-6) {
        let acq = AcquisitionSpec { bin_count: 512, ..Default::default() };
        prop_assert_eq!(synthesize(&truth(z, 50e6, seed), &acq).unwrap(), synthesize(&truth(z, 50e6, seed), &acq).unwrap());
    }

    #[test]
    fn electrode_position_never_moves_frequencies(u in 0.02f64..0.98, v in 0.02f64..0.98, seed in any::<u64>()) {
        let t = truth(15e-6, 50e6, seed);
        let base = placed_modes(&t, &AcquisitionSpec::default()).unwrap();
        let moved = placed_modes(&t, &AcquisitionSpec { electrode_position: (u, v), ..Default::default() }).unwrap();
        prop_assert_eq!(base.len(), moved.len());
        for (a, b) in base.iter().zip(&moved) {
            prop_assert_eq!(a.mode, b.mode);
            prop_assert_eq!(a.frequency, b.frequency);
        }
    }

    #[test]
    fn peaks_sorted_and_separated((lines, noise) in lines_strategy(), sep in 100.0f64..3000.0) {
        let r = spectrum(&lines, &noise);
        let p = find_peaks(&r, 5.0, sep);
        prop_assert!(p.windows(2).all(|w| w[1].frequency - w[0].frequency >= sep));
        prop_assert!(p.iter().all(|p| p.amplitude > 0.0 && p.frequency >= 1e5 && p.frequency <= 2e5));
    }

    #[test]
    fn peak_frequencies_scale_invariant((lines, noise) in lines_strategy(), c in 1e-3f64..1e3) {
        let r = spectrum(&lines, &noise);
        let a: Vec<f64> = find_peaks(&r, 5.0, 500.0).iter().map(|p| p.frequency).collect();
        let b: Vec<f64> = find_peaks(&r.scaled(c), 5.0, 500.0).iter().map(|p| p.frequency).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn refinement_stays_inside_window((lines, noise) in lines_strategy(), w in 5usize..15) {
        let r = spectrum(&lines, &noise);
        let bw = r.freqs[1] - r.freqs[0];
        for p in find_peaks(&r, 5.0, 500.0) {
            let q = refine_lorentzian(&r, &p, w);
            prop_assert!((q.frequency - p.frequency).abs() <= (w / 2) as f64 * bw + 1e-6);
            prop_assert!(!q.refined || q.width > 0.0);
        }
    }

    #[test]
    fn eie_is_translation_consistent(p in prop::collection::vec(10.0f64..20.0, 2..8), c in -5.0f64..5.0) {
        let est: Vec<Vec<f64>> = p.iter().map(|&v| vec![v]).collect();
        let shifted: Vec<Vec<f64>> = p.iter().map(|&v| vec![v + c]).collect();
        let (e1, _) = eie(&est).unwrap();
        let (e2, n2) = eie(&shifted).unwrap();
        prop_assert!((e1[0] - e2[0]).abs() <= 1e-12 * 30.0);
        let mean = p.iter().sum::<f64>() / p.len() as f64 + c;
        prop_assert!((n2[0].unwrap() - e2[0] / mean.abs()).abs() <= 1e-12);
    }

    #[test]
    fn noiseless_closed_loop_recovers_thickness(z in 14.25e-6f64..15.75e-6, s in 31.25e6f64..68.75e6) {
        let plate = SensorDesign::default().plate(z, s).unwrap();
        let peaks: Vec<Peak> = surrogate().mode_groups.iter().map(|g| peak(plate.frequency(g[0]))).collect();
        let cfg = IdentificationConfig::for_surrogate(surrogate(), IdentMode::Characterization);
        let r = assign_and_identify(&peaks, surrogate(), &cfg).unwrap();
        prop_assert_eq!(r.classification, Classification::Valid);
        prop_assert!((r.param(Parameter::Thickness).unwrap() - z).abs() <= surrogate().accuracy * z);
    }

    #[test]
    fn failure_bit_matches_classification_and_limits(
        z in 13.5e-6f64..16.5e-6, s in 20e6f64..80e6,
        jitter in prop::collection::vec(-0.01f64..0.01, 4),
        extra in prop::collection::vec(5e4f64..4e5, 0..4), drop in 0usize..5,
    ) {
        let plate = SensorDesign::default().plate(z, s).unwrap();
        let mut peaks: Vec<Peak> = surrogate().mode_groups.iter().zip(&jitter)
            .map(|(g, j)| peak(plate.frequency(g[0]) * (1.0 + j))).collect();
        if drop < peaks.len() {
            peaks.remove(drop);
        }
        peaks.extend(extra.iter().map(|&f| peak(f)));
        peaks.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));
        let cfg = IdentificationConfig::for_surrogate(surrogate(), IdentMode::Characterization);
        let r = assign_and_identify(&peaks, surrogate(), &cfg).unwrap();
        prop_assert_eq!(r.failure_bit, r.classification != Classification::Valid || limits_exceeded(&r, &cfg));
        prop_assert_eq!(classify(&r, &peaks, &cfg), r.classification);
        if !r.mode_frequencies.is_empty() {
            let (e, _) = eie(&r.per_combo_params).unwrap();
            prop_assert_eq!(&e, &r.eie);
        }
    }

    #[test]
    fn selected_assignment_is_minimal(
        z in 14.2e-6f64..15.8e-6, s in 30e6f64..70e6,
        jitter in prop::collection::vec(-2e-3f64..2e-3, 4),
        extra in prop::collection::vec((6e4f64..3.6e5, 0.01f64..2.0), 0..4),
    ) {
        let plate = SensorDesign::default().plate(z, s).unwrap();
        let mut peaks: Vec<Peak> = surrogate().mode_groups.iter().zip(&jitter)
            .map(|(g, j)| peak(plate.frequency(g[0]) * (1.0 + j))).collect();
        peaks.extend(extra.iter().map(|&(f, a)| Peak { amplitude: a, ..peak(f) }));
        peaks.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));
        let cfg = IdentificationConfig::for_surrogate(surrogate(), IdentMode::Characterization);
        let r = assign_and_identify(&peaks, surrogate(), &cfg).unwrap();
        let chosen = objective(&r.per_combo_params, &cfg);
        for other in brute_force_objectives(&peaks, surrogate(), &cfg) {
            prop_assert!(chosen.unwrap() <= other + 1e-15, "{:?} > {}", chosen, other);
        }
    }

    #[test]
    fn gain_fit_is_scale_equivariant(c in 0.01f64..100.0, seed in any::<u64>()) {
        let d = SensorDesign::default();
        let t = truth(15e-6, 50e6, 0);
        let s = sweep(&t, &d.piezo, &StaticConfig::default().pressures(), Some((0.01, seed))).unwrap();
        let r1 = adapt_gain(&s, (15e-6, 50e6), &d).unwrap();
        let scaled = StaticSweep { voltages: s.voltages.iter().map(|v| c * v).collect(), ..s.clone() };
        let r2 = adapt_gain(&scaled, (15e-6, 50e6), &d).unwrap();
        prop_assert!((r2.fitted_gain - c * r1.fitted_gain).abs() <= 1e-12 * (c * r1.fitted_gain).abs());
        let slope = d.plate(15e-6, 50e6).unwrap().stress_difference(1.0, d.piezo.resistor_location, 99).unwrap().value;
        prop_assert!((r1.sensitivity - r1.fitted_gain * d.piezo.supply_voltage * slope).abs() <= 1e-12 * r1.sensitivity.abs());
    }

    #[test]
    fn exact_parameters_without_noise_correlate_perfectly(z in 12e-6f64..18e-6, s in 0.0f64..100e6, pmax in 0.1f64..7.0) {
        let d = SensorDesign::default();
        let t = truth(z, s, 0);
        let pressures = linspace(0.0, pmax * BAR, 8);
        let sw = sweep(&t, &d.piezo, &pressures, None).unwrap();
        let r = adapt_gain(&sw, (z, s), &d).unwrap();
        prop_assert!(r.max_rel_voltage_error < 1e-12);
    }
}

fn objective(estimates: &[Vec<f64>], cfg: &IdentificationConfig) -> Option<f64> {
    let (e, n) = eie(estimates).ok()?;
    Some(
        e.iter()
            .zip(&n)
            .zip(&cfg.limits)
            .map(|((e, n), l)| n.unwrap_or(e / (l.range.1 - l.range.0)))
            .sum(),
    )
}

type Visit<'a> = dyn FnMut(&[(usize, usize)]) + 'a;

/// Objective of every feasible assignment, enumerated without the search.
fn brute_force_objectives(peaks: &[Peak], s: &InverseSurrogate, cfg: &IdentificationConfig) -> Vec<f64> {
    let k = s.mode_count();
    let n = peaks.len();
    let window = |pos: usize, i: usize| {
        let (lo, hi) = s.mode_domains[pos];
        let f = peaks[i].frequency;
        f >= lo * (1.0 - cfg.window_margin) && f <= hi * (1.0 + cfg.window_margin)
    };
    // every position takes a run of one or two consecutive peak indices
    let mut out = Vec::new();
    let mut choice: Vec<(usize, usize)> = Vec::new();
    fn rec(pos: usize, start: usize, k: usize, n: usize, choice: &mut Vec<(usize, usize)>, visit: &mut Visit) {
        if pos == k {
            visit(choice);
            return;
        }
        for i in start..n {
            for len in 1..=2 {
                if i + len > n {
                    continue;
                }
                choice.push((i, len));
                rec(pos + 1, i + len, k, n, choice, visit);
                choice.pop();
            }
        }
    }
    rec(0, 0, k, n, &mut choice, &mut |c| {
        let ok = c
            .iter()
            .enumerate()
            .all(|(pos, &(i, len))| (len == 1 || s.mode_groups[pos].len() > 1) && (i..i + len).all(|j| window(pos, j)));
        // an unassigned peak may not outshine what its window's position took
        let assigned = |j: usize| c.iter().any(|&(i, len)| j >= i && j < i + len);
        let outshone = c.iter().enumerate().any(|(pos, &(i, len))| {
            let taken = (i..i + len).map(|j| peaks[j].amplitude).fold(0.0, f64::max);
            (0..n).any(|j| !assigned(j) && window(pos, j) && peaks[j].amplitude > taken)
        });
        if !ok || outshone {
            return;
        }
        let freqs: Vec<f64> = c
            .iter()
            .map(|&(i, len)| (i..i + len).map(|j| peaks[j].frequency).sum::<f64>() / len as f64)
            .collect();
        let est: Vec<Vec<f64>> = s.evaluate_all(&freqs).into_iter().map(|e| e.params).collect();
        let feasible = est.iter().all(|e| {
            e.iter().zip(&cfg.limits).all(|(v, l)| {
                let pad = cfg.feasibility_margin * (l.range.1 - l.range.0);
                *v >= l.range.0 - pad && *v <= l.range.1 + pad
            })
        });
        if feasible {
            out.extend(objective(&est, cfg));
        }
    });
    out
}

fn small_wafer(seed: u64, exclude: Vec<String>) -> WaferSpec {
    let mut f = WaferSpecFile::new(3, 4, seed);
    f.random_defects.no_membrane_fraction = 0.1;
    f.random_defects.asymmetry_fraction = 0.1;
    f.exclude = exclude;
    WaferSpec::from_file(f, Path::new(".")).unwrap()
}

fn calibration() -> Calibration {
    Calibration {
        calibrated_stress_mpa: 50.0,
        recommended_max_eie_um: None,
        recommended_max_stress_eie_mpa: None,
        dies_used: 12,
        valid_dies: 12,
        dies: vec![],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn wafer_runs_are_deterministic_and_dies_independent(seed in any::<u64>(), drop in 0usize..12) {
        let full = small_wafer(seed, vec![]);
        let a = run_wafer(&full, surrogate(), &calibration()).unwrap();
        let b = run_wafer(&full, surrogate(), &calibration()).unwrap();
        prop_assert_eq!(a.to_csv_string(), b.to_csv_string());
        prop_assert_eq!(a.summary.counts.values().sum::<usize>(), a.rows.len());

        let removed = full.sites()[drop].id();
        let partial = small_wafer(seed, vec![removed.clone()]);
        let c = run_wafer(&partial, surrogate(), &calibration()).unwrap();
        let kept: Vec<_> = a.rows.iter().filter(|r| r.die_id != removed).cloned().collect();
        prop_assert_eq!(kept, c.rows);
        for r in &a.rows {
            prop_assert!(["valid", "type1_no_membrane", "type2_asymmetric", "out_of_range", "error"].contains(&r.status.as_str()));
        }
    }
}
