//! Reference solutions used by the integration tests, computed without the
//! library's closed-form expressions.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

/// Plate constants entering the finite-difference operator.
#[derive(Debug, Clone, Copy)]
pub struct PlateConstants {
    pub side_a: f64,
    pub side_b: f64,
    pub rigidity: f64,
    pub tension: f64,
    pub areal_mass: f64,
}

impl PlateConstants {
    #[allow(clippy::too_many_arguments)]
    pub fn new(e: f64, nu: f64, rho: f64, z: f64, t_pass: f64, rho_pass: f64, stress: f64, a: f64, b: f64) -> Self {
        PlateConstants {
            side_a: a,
            side_b: b,
            rigidity: e * z.powi(3) / (12.0 * (1.0 - nu * nu)),
            tension: stress * t_pass,
            areal_mass: rho * z + rho_pass * t_pass,
        }
    }

    fn frequency(&self, mu: f64) -> f64 {
        ((self.rigidity * mu * mu + self.tension * mu) / self.areal_mass).sqrt() / (2.0 * PI)
    }
}

/// Eigenvalues of the negative 1-D second difference with Dirichlet ends,
/// solved numerically.
fn neg_second_difference_eigs(n: usize, length: f64) -> Vec<f64> {
    let h = length / (n + 1) as f64;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 2.0 / (h * h);
        if i + 1 < n {
            m[(i, i + 1)] = -1.0 / (h * h);
            m[(i + 1, i)] = -1.0 / (h * h);
        }
    }
    let mut e: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

/// Lowest `k` natural frequencies of the simply supported plate
/// `D lap^2 w - N lap w = rho_A omega^2 w` on an `n x n` interior grid.
///
/// With simply supported edges the 13-point biharmonic stencil equals the
/// square of the 5-point Laplacian, so the 2-D spectrum follows from the two
/// 1-D spectra by Kronecker summation.
pub fn fd_frequencies(p: &PlateConstants, n: usize, k: usize) -> Vec<f64> {
    let ex = neg_second_difference_eigs(n, p.side_a);
    let ey = neg_second_difference_eigs(n, p.side_b);
    let mut mus: Vec<f64> = ex
        .iter()
        .take(2 * k + 2)
        .flat_map(|a| ey.iter().take(2 * k + 2).map(move |b| a + b))
        .collect();
    mus.sort_by(f64::total_cmp);
    mus.iter().take(k).map(|&mu| p.frequency(mu)).collect()
}

/// Same spectrum from an explicitly assembled 13-point biharmonic plus
/// 5-point tension operator (square grid, `a == b`), dense eigensolve.
pub fn fd_frequencies_assembled(p: &PlateConstants, n: usize, k: usize) -> Vec<f64> {
    assert_eq!(p.side_a, p.side_b, "assembled oracle is for square plates");
    let h = p.side_a / (n + 1) as f64;
    let idx = |i: i64, j: i64| (i * n as i64 + j) as usize;
    // value of neighbour (i, j) as (coefficient sign, index), ghost rows
    // reflect antisymmetrically across the supported edge
    let resolve = |i: i64, j: i64| -> Option<(f64, usize)> {
        let fold = |t: i64| -> Option<(f64, i64)> {
            let n = n as i64;
            if t == -1 || t == n {
                None
            } else if t == -2 {
                Some((-1.0, 0))
            } else if t == n + 1 {
                Some((-1.0, n - 1))
            } else {
                Some((1.0, t))
            }
        };
        let (si, ii) = fold(i)?;
        let (sj, jj) = fold(j)?;
        Some((si * sj, idx(ii, jj)))
    };
    let size = n * n;
    let mut kmat = DMatrix::<f64>::zeros(size, size);
    let bih: [(i64, i64, f64); 13] = [
        (0, 0, 20.0),
        (1, 0, -8.0),
        (-1, 0, -8.0),
        (0, 1, -8.0),
        (0, -1, -8.0),
        (1, 1, 2.0),
        (1, -1, 2.0),
        (-1, 1, 2.0),
        (-1, -1, 2.0),
        (2, 0, 1.0),
        (-2, 0, 1.0),
        (0, 2, 1.0),
        (0, -2, 1.0),
    ];
    let lap: [(i64, i64, f64); 5] = [(0, 0, 4.0), (1, 0, -1.0), (-1, 0, -1.0), (0, 1, -1.0), (0, -1, -1.0)];
    for i in 0..n as i64 {
        for j in 0..n as i64 {
            let row = idx(i, j);
            for &(di, dj, c) in &bih {
                if let Some((s, col)) = resolve(i + di, j + dj) {
                    kmat[(row, col)] += p.rigidity * s * c / h.powi(4);
                }
            }
            for &(di, dj, c) in &lap {
                if let Some((s, col)) = resolve(i + di, j + dj) {
                    kmat[(row, col)] += p.tension * s * c / (h * h);
                }
            }
        }
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(kmat).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev.iter()
        .take(k)
        .map(|&l| (l / p.areal_mass).sqrt() / (2.0 * PI))
        .collect()
}

/// Centre deflection from the double sine series summed to `terms` odd
/// indices per direction.
pub fn navier_center_deflection(p: &PlateConstants, pressure: f64, terms: usize) -> f64 {
    let (a, b) = (p.side_a, p.side_b);
    let mut w = 0.0;
    for mi in 0..terms {
        let m = (2 * mi + 1) as f64;
        for ni in 0..terms {
            let n = (2 * ni + 1) as f64;
            let kappa = (m * PI / a).powi(2) + (n * PI / b).powi(2);
            let sign = if (mi + ni) % 2 == 0 { 1.0 } else { -1.0 };
            w += sign * 16.0 * pressure / (PI * PI * m * n * (p.rigidity * kappa * kappa + p.tension * kappa));
        }
    }
    w
}
