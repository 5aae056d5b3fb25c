//! Electro-communication inversion: multi-static response matrix and the
//! multi-position MUSIC dipole search.
//!
//! The measuring fish subtracts its own-body contribution `H^{u2}` from the
//! conspecific component on its skin; what remains is the field radiated by
//! the other fish, well approximated by a single equivalent dipole. Stacking
//! the real part of these readings over closely spaced positions gives the
//! MSR matrix whose leading eigenvector spans the signal subspace; the
//! localizer tests each grid node's lead field against the noise subspace
//! and takes the best position.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::ForwardSolution;
use crate::geometry::{interp_periodic_complex, receptor_params, SearchGrid, Vec2};
use crate::potential::{self, apply_real_matrix};

/// `H^{u}` of a body in a solution: the single-minus-xi-double layer of the
/// body's own exterior Neumann trace, evaluated off the body.
pub fn compute_h_u2(sol: &ForwardSolution, body: usize, p: Vec2) -> Complex64 {
    let b = &sol.bodies[body];
    potential::eval_single_layer(&b.mesh, &b.psi, p)
        - potential::eval_double_layer(&b.mesh, &b.psi, p) * b.spec.xi
}

/// `(u - H^{u})` on the nodes of the given body's boundary (exterior trace).
///
/// Uses the on-boundary operators: `v + xi (I/2 + K) psi - S psi`.
pub fn conspecific_data_on_nodes(sol: &ForwardSolution, body: usize) -> Vec<Complex64> {
    let b = &sol.bodies[body];
    let kpsi = apply_real_matrix(&b.ops.k, &b.psi);
    let spsi = apply_real_matrix(&b.ops.s, &b.psi);
    (0..b.mesh.n_panels())
        .map(|j| b.v[j] + b.spec.xi * (0.5 * b.psi[j] + kpsi[j]) - spsi[j])
        .collect()
}

/// Same data computed from an exterior trace pair `(u|+, psi)` alone, e.g.
/// after signal separation recovered both traces on the skin.
pub fn conspecific_data_from_traces(
    u_plus: &[Complex64],
    psi: &[Complex64],
    ops: &crate::potential::SelfOperators,
    xi: f64,
) -> Vec<Complex64> {
    let kpsi = apply_real_matrix(&ops.k, psi);
    let spsi = apply_real_matrix(&ops.s, psi);
    (0..u_plus.len())
        .map(|j| u_plus[j] - (spsi[j] - xi * (-0.5 * psi[j] + kpsi[j])))
        .collect()
}

/// One MSR column: real conspecific data at the receptors of `body`, plus
/// the receptor geometry.
pub fn msr_column(sol: &ForwardSolution, body: usize) -> Result<(Vec<f64>, Vec<(Vec2, Vec2)>)> {
    let b = &sol.bodies[body];
    let data = conspecific_data_on_nodes(sol, body);
    let params = receptor_params(&b.mesh, b.spec.n_receptors)?;
    let receptors = b.spec.receptors(&b.mesh)?;
    let vals = params
        .iter()
        .map(|t| interp_periodic_complex(&data, *t).re)
        .collect();
    Ok((vals, receptors))
}

/// Multi-static response matrix: receptors x positions, real part, with
/// additive Gaussian noise scaled by the data range.
#[derive(Debug, Clone)]
pub struct MsrMatrix {
    /// Noisy data (what the localizer sees).
    pub data: DMatrix<f64>,
    /// Noiseless data, kept for diagnostics.
    pub clean: DMatrix<f64>,
    /// Receptor (position, normal) pairs per column.
    pub receptors: Vec<Vec<(Vec2, Vec2)>>,
    pub sigma0: f64,
    pub sigma_noise: f64,
    pub seed: u64,
}

impl MsrMatrix {
    /// Assemble from per-position columns and add noise with standard
    /// deviation `(max F - min F) * sigma0`, reproducible under `seed`.
    pub fn from_columns(
        columns: Vec<(Vec<f64>, Vec<(Vec2, Vec2)>)>,
        sigma0: f64,
        seed: u64,
    ) -> Result<MsrMatrix> {
        if columns.is_empty() {
            return Err(Error::InvalidParameter("MSR needs at least one position".into()));
        }
        if sigma0 < 0.0 {
            return Err(Error::InvalidParameter("noise level must be nonnegative".into()));
        }
        let n_r = columns[0].0.len();
        if columns.iter().any(|(c, _)| c.len() != n_r) {
            return Err(Error::InvalidParameter("MSR columns differ in length".into()));
        }
        let n_s = columns.len();
        let mut clean = DMatrix::<f64>::zeros(n_r, n_s);
        let mut receptors = Vec::with_capacity(n_s);
        for (s, (col, rec)) in columns.into_iter().enumerate() {
            for (r, v) in col.into_iter().enumerate() {
                clean[(r, s)] = v;
            }
            receptors.push(rec);
        }
        let fmax = clean.max();
        let fmin = clean.min();
        let sigma_noise = (fmax - fmin) * sigma0;
        let mut data = clean.clone();
        if sigma_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma_noise).map_err(|e| {
                Error::InvalidParameter(format!("bad noise distribution: {e}"))
            })?;
            for s in 0..n_s {
                for r in 0..n_r {
                    data[(r, s)] += normal.sample(&mut rng);
                }
            }
        }
        Ok(MsrMatrix {
            data,
            clean,
            receptors,
            sigma0,
            sigma_noise,
            seed,
        })
    }

    pub fn n_receptors(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_positions(&self) -> usize {
        self.data.ncols()
    }
}

/// Lead field of a dipole at `z` seen by the given receptors: row `l` is
/// `(x_l - z)^T / ||x_l - z||^2`.
pub fn lead_field(z: Vec2, receptors: &[(Vec2, Vec2)]) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::<f64>::zeros(receptors.len(), 2);
    for (l, (x, _)) in receptors.iter().enumerate() {
        let d = x - z;
        let r2 = d.norm_squared();
        if r2 == 0.0 {
            return Err(Error::InvalidParameter(
                "lead field evaluated at a receptor position".into(),
            ));
        }
        a[(l, 0)] = d.x / r2;
        a[(l, 1)] = d.y / r2;
    }
    Ok(a)
}

/// Smallest generalized eigenvalue of the symmetric 2x2 pencil `(B, C)`
/// with `C` positive definite.
fn min_gen_eig_2x2(b: &Matrix2<f64>, c: &Matrix2<f64>) -> Option<f64> {
    let det_c = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
    if det_c <= 1e-300 {
        return None;
    }
    let a2 = det_c;
    let a1 = -(b[(0, 0)] * c[(1, 1)] + b[(1, 1)] * c[(0, 0)]
        - b[(0, 1)] * c[(1, 0)]
        - b[(1, 0)] * c[(0, 1)]);
    let a0 = b[(0, 0)] * b[(1, 1)] - b[(0, 1)] * b[(1, 0)];
    let disc = (a1 * a1 - 4.0 * a2 * a0).max(0.0).sqrt();
    let l1 = (-a1 - disc) / (2.0 * a2);
    let l2 = (-a1 + disc) / (2.0 * a2);
    Some(l1.min(l2).max(0.0))
}

/// Equivalent-dipole estimate produced by the MUSIC search.
#[derive(Debug, Clone)]
pub struct DipoleEstimate {
    /// Sub-grid estimate after one quadratic refinement step.
    pub z_hat: Vec2,
    /// Best grid node (always on the search grid).
    pub grid_peak: Vec2,
    /// Dipole moment from the least-squares fit at the peak.
    pub p_hat: Vec2,
    /// Orientation estimate, sign-ambiguous in one-shot mode.
    pub heading_hat: Vec2,
    pub localizer_peak: f64,
    /// Relative residual of `Phi_1 = A(z) p`.
    pub residual: f64,
    /// Position index attaining the localizer maximum.
    pub best_position: usize,
}

/// Least-squares dipole moment at `z`: solves `phi = A(z) p` via the normal
/// equations. Fails when the lead field is rank deficient, which happens
/// when the receptors are collinear through `z`.
pub fn fit_moment(
    z: Vec2,
    receptors: &[(Vec2, Vec2)],
    phi: &DVector<f64>,
) -> Result<(Vec2, f64)> {
    let a = lead_field(z, receptors)?;
    let ata = a.transpose() * &a;
    let det = ata[(0, 0)] * ata[(1, 1)] - ata[(0, 1)] * ata[(1, 0)];
    if det.abs() < 1e-12 * (ata[(0, 0)] + ata[(1, 1)]).powi(2).max(1e-300) {
        return Err(Error::LocalizationFailed(
            "lead field is rank deficient (receptors collinear through the estimate)".into(),
        ));
    }
    let atphi = a.transpose() * phi;
    let inv = Matrix2::new(ata[(1, 1)], -ata[(0, 1)], -ata[(1, 0)], ata[(0, 0)]) / det;
    let p = inv * Vector2::new(atphi[0], atphi[1]);
    let fit = &a * DVector::from_column_slice(&[p.x, p.y]);
    let residual = (&fit - phi).norm() / phi.norm();
    Ok((Vec2::new(p.x, p.y), residual))
}

/// Quadratic sub-grid refinement of a peak on the localizer map.
pub fn refine_peak(grid: &SearchGrid, map: &[f64], idx: usize) -> Vec2 {
    let (ix, iy) = grid.coords(idx);
    let mut z = grid.points[idx];
    let h = grid.resolution;
    let value = |ix: usize, iy: usize| -> Option<f64> {
        let i = grid.index(ix, iy);
        if grid.excluded[i] || !map[i].is_finite() {
            None
        } else {
            Some(map[i])
        }
    };
    if ix > 0 && ix + 1 < grid.nx {
        if let (Some(l), Some(c), Some(r)) = (value(ix - 1, iy), value(ix, iy), value(ix + 1, iy)) {
            let den = l - 2.0 * c + r;
            if den < 0.0 {
                let off = 0.5 * (l - r) / den;
                z.x += off.clamp(-0.5, 0.5) * h;
            }
        }
    }
    if iy > 0 && iy + 1 < grid.ny {
        if let (Some(d), Some(c), Some(u)) = (value(ix, iy - 1), value(ix, iy), value(ix, iy + 1)) {
            let den = d - 2.0 * c + u;
            if den < 0.0 {
                let off = 0.5 * (d - u) / den;
                z.y += off.clamp(-0.5, 0.5) * h;
            }
        }
    }
    z
}

/// Multi-position MUSIC dipole search.
///
/// Eigendecomposes `F F^T` of the real noisy MSR, projects lead fields onto
/// the noise subspace and maximizes
/// `I_2(z) = max_s 1 / lambda_min(A_s^T P_N A_s, A_s^T A_s)` over the grid.
pub fn music_localize(
    msr: &MsrMatrix,
    grid: &SearchGrid,
    signal_dim: usize,
) -> Result<(DipoleEstimate, Vec<f64>)> {
    let n_r = msr.n_receptors();
    if n_r <= 2 {
        return Err(Error::InvalidParameter(
            "MUSIC needs more than two receptors for a nonempty noise subspace".into(),
        ));
    }
    if signal_dim == 0 || signal_dim >= n_r {
        return Err(Error::InvalidParameter(format!(
            "signal subspace dimension {signal_dim} out of range"
        )));
    }
    if grid.points.iter().zip(&grid.excluded).all(|(_, e)| *e) {
        return Err(Error::LocalizationFailed("empty search grid".into()));
    }

    let f = &msr.data;
    let c = f * f.transpose();
    let eig = nalgebra::SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n_r).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].partial_cmp(&eig.eigenvalues[*a]).unwrap());
    let phi1: DVector<f64> = eig.eigenvectors.column(order[0]).into();
    // Noise projector P_N = I - sum of signal eigenvector outer products.
    let mut p_n = DMatrix::<f64>::identity(n_r, n_r);
    for k in 0..signal_dim {
        let v = eig.eigenvectors.column(order[k]);
        for i in 0..n_r {
            for j in 0..n_r {
                p_n[(i, j)] -= v[i] * v[j];
            }
        }
    }

    // Per-position receptor matrices once.
    let positions: Vec<&Vec<(Vec2, Vec2)>> = msr.receptors.iter().collect();

    let evals: Vec<(f64, usize)> = grid
        .points
        .par_iter()
        .zip(grid.excluded.par_iter())
        .map(|(z, excluded)| {
            if *excluded {
                return (f64::NAN, usize::MAX);
            }
            let mut best = f64::NEG_INFINITY;
            let mut best_s = 0usize;
            for (s, rec) in positions.iter().enumerate() {
                let a = match lead_field(*z, rec) {
                    Ok(a) => a,
                    Err(_) => continue,
                };
                let pa = &p_n * &a;
                let b = Matrix2::new(
                    a.column(0).dot(&pa.column(0)),
                    a.column(0).dot(&pa.column(1)),
                    a.column(1).dot(&pa.column(0)),
                    a.column(1).dot(&pa.column(1)),
                );
                let cmat = Matrix2::new(
                    a.column(0).dot(&a.column(0)),
                    a.column(0).dot(&a.column(1)),
                    a.column(1).dot(&a.column(0)),
                    a.column(1).dot(&a.column(1)),
                );
                if let Some(lmin) = min_gen_eig_2x2(&b, &cmat) {
                    let val = 1.0 / lmin.max(1e-300);
                    if val > best {
                        best = val;
                        best_s = s;
                    }
                }
            }
            (best, best_s)
        })
        .collect();

    let map: Vec<f64> = evals.iter().map(|(v, _)| *v).collect();
    let mut best_idx = None;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in map.iter().enumerate() {
        if v.is_finite() && *v > best_val {
            best_val = *v;
            best_idx = Some(i);
        }
    }
    let best_idx = best_idx
        .ok_or_else(|| Error::LocalizationFailed("localizer map has no finite peak".into()))?;
    let best_s = evals[best_idx].1;
    let z_hat = refine_peak(grid, &map, best_idx);

    // Moment from the least-squares fit Phi_1 = A(z) p at the best position.
    let (p_hat, residual) = fit_moment(z_hat, msr.receptors[best_s].as_slice(), &phi1)?;
    let heading_hat = if p_hat.norm() > 0.0 {
        p_hat / p_hat.norm()
    } else {
        Vec2::new(1.0, 0.0)
    };

    Ok((
        DipoleEstimate {
            z_hat,
            grid_peak: grid.points[best_idx],
            p_hat,
            heading_hat,
            localizer_peak: best_val,
            residual,
            best_position: best_s,
        },
        map,
    ))
}

/// Convenience: build MSR columns by solving the forward problem for each
/// scene snapshot (one snapshot per measurement position).
pub fn columns_from_scenes(
    scenes: &[crate::forward::Scene],
    follower: usize,
    active: usize,
    opts: &crate::forward::ForwardOptions,
) -> Result<Vec<(Vec<f64>, Vec<(Vec2, Vec2)>)>> {
    scenes
        .par_iter()
        .map(|scene| {
            let sol = crate::forward::solve_scene(scene, active, 0.0, opts)?;
            msr_column(&sol, follower)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{solve_scene, ForwardOptions, Scene};
    use crate::geometry::{make_search_grid, EodSignal, FishSpec, MediumParams, Rect};

    fn wave() -> EodSignal {
        EodSignal::Wave { omega: 1.3 }
    }

    fn two_fish_scene() -> Scene {
        Scene {
            fish: vec![
                FishSpec::standard(Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), 0.3, EodSignal::Wave { omega: 1.0 })
                    .unwrap(),
                FishSpec::standard(Vec2::new(6.0, 4.0), Vec2::new(0.0, 1.0), 0.3, wave()).unwrap(),
            ],
            target: None,
            medium: MediumParams::default(),
        }
    }

    fn opts() -> ForwardOptions {
        ForwardOptions { n_panels_fish: 128, n_panels_target: 64 }
    }

    #[test]
    fn silent_conspecific_gives_zero_data() {
        let mut scene = two_fish_scene();
        scene.fish[1].organ = scene.fish[1].organ.scaled(num_complex::Complex64::new(0.0, 0.0));
        let sol = solve_scene(&scene, 1, 0.0, &opts()).unwrap();
        let data = conspecific_data_on_nodes(&sol, 0);
        for d in data {
            assert!(d.norm() < 1e-12);
        }
        let h = compute_h_u2(&sol, 0, Vec2::new(3.0, 3.0));
        assert!(h.norm() < 1e-12);
    }

    #[test]
    fn data_matches_other_body_representation() {
        // (u2 - H^{u2}) on the follower equals the active body's layer
        // representation plus its organ potential, computed independently
        // from boundary data of the other fish.
        let scene = two_fish_scene();
        let sol = solve_scene(&scene, 1, 0.0, &opts()).unwrap();
        let lhs = conspecific_data_on_nodes(&sol, 0);
        let b2 = &sol.bodies[1];
        for (j, p) in sol.bodies[0].mesh.points.iter().enumerate() {
            let mut rhs = potential::eval_single_layer(&b2.mesh, &b2.psi, *p)
                - potential::eval_double_layer(&b2.mesh, &b2.psi, *p) * b2.spec.xi;
            rhs += sol.source_potential(*p);
            assert!(
                (lhs[j] - rhs).norm() < 1e-5,
                "node {j}: {} vs {}",
                lhs[j],
                rhs
            );
        }
    }

    #[test]
    fn data_scales_with_organ_strength() {
        let scene = two_fish_scene();
        let sol = solve_scene(&scene, 1, 0.0, &opts()).unwrap();
        let mut scene2 = scene.clone();
        scene2.fish[1].organ = scene2.fish[1].organ.scaled(num_complex::Complex64::new(2.0, 0.0));
        let sol2 = solve_scene(&scene2, 1, 0.0, &opts()).unwrap();
        let d1 = conspecific_data_on_nodes(&sol, 0);
        let d2 = conspecific_data_on_nodes(&sol2, 0);
        for j in 0..d1.len() {
            assert!((d1[j] * 2.0 - d2[j]).norm() < 1e-9 * (1.0 + d2[j].norm()));
        }
    }

    #[test]
    fn lead_field_rows() {
        let rec = vec![
            (Vec2::new(1.0, 0.0), Vec2::new(1.0, 0.0)),
            (Vec2::new(0.0, 2.0), Vec2::new(0.0, 1.0)),
        ];
        let a = lead_field(Vec2::zeros(), &rec).unwrap();
        assert!((a[(0, 0)] - 1.0).abs() < 1e-15 && a[(0, 1)].abs() < 1e-15);
        assert!(a[(1, 0)].abs() < 1e-15 && (a[(1, 1)] - 0.5).abs() < 1e-15);
        assert!(lead_field(Vec2::new(1.0, 0.0), &rec).is_err());
    }

    #[test]
    fn lead_field_matches_dipole_kernel_differences() {
        // A(z) p equals the finite difference of the point-source kernel:
        // [Gamma(x - z - eps p) - Gamma(x - z)] * (-2 pi / eps).
        let rec: Vec<(Vec2, Vec2)> = (0..8)
            .map(|k| {
                let th = 0.4 + 0.2 * k as f64;
                (Vec2::new(3.0 * th.cos(), 2.0 + th.sin()), Vec2::new(1.0, 0.0))
            })
            .collect();
        let z = Vec2::new(0.3, -0.2);
        let p = Vec2::new(0.6, -0.8);
        let a = lead_field(z, &rec).unwrap();
        let eps = 1e-5;
        for (l, (x, _)) in rec.iter().enumerate() {
            let ap = a[(l, 0)] * p.x + a[(l, 1)] * p.y;
            let fd = (potential::log_kernel(*x, z + p * eps) - potential::log_kernel(*x, z))
                * (-2.0 * std::f64::consts::PI / eps);
            assert!((ap - fd).abs() <= 1e-3 * ap.abs().max(1e-6), "{ap} vs {fd}");
        }
    }

    fn synthetic_columns(
        z: Vec2,
        p: Vec2,
        n_positions: usize,
    ) -> Vec<(Vec<f64>, Vec<(Vec2, Vec2)>)> {
        // A ring of receptors swept through closely spaced positions.
        (0..n_positions)
            .map(|s| {
                let shift = Vec2::new(0.02 * s as f64, 0.0);
                let rec: Vec<(Vec2, Vec2)> = (0..12)
                    .map(|k| {
                        let th = 2.0 * std::f64::consts::PI * k as f64 / 12.0;
                        (
                            Vec2::new(th.cos(), 0.4 * th.sin()) + shift,
                            Vec2::new(th.cos(), th.sin()),
                        )
                    })
                    .collect();
                let a = lead_field(z, &rec).unwrap();
                let col: Vec<f64> = (0..rec.len()).map(|l| a[(l, 0)] * p.x + a[(l, 1)] * p.y).collect();
                (col, rec)
            })
            .collect()
    }

    #[test]
    fn localizes_synthetic_dipole_exactly() {
        let z_true = Vec2::new(4.05, 2.55);
        let p_true = Vec2::new(0.8, -0.6);
        let msr = MsrMatrix::from_columns(synthetic_columns(z_true, p_true, 20), 0.0, 1).unwrap();
        let grid = make_search_grid(Rect::new(2.0, 6.0, 1.0, 4.0).unwrap(), 0.1, &[]).unwrap();
        let (est, map) = music_localize(&msr, &grid, 1).unwrap();
        assert!((est.grid_peak - z_true).norm() <= 0.1 * 1.5_f64.sqrt() + 1e-12);
        assert!((est.z_hat - z_true).norm() <= 0.08, "refined {:?}", est.z_hat);
        assert!(est.residual <= 1e-2, "residual {}", est.residual);
        // Moment direction recovered up to sign.
        let cosang = est.heading_hat.dot(&(p_true / p_true.norm()));
        assert!(cosang.abs() > 0.99, "heading {:?}", est.heading_hat);
        assert_eq!(map.len(), grid.points.len());
    }

    #[test]
    fn localizer_invariant_under_positive_scaling() {
        let z_true = Vec2::new(4.0, 2.5);
        let p_true = Vec2::new(0.3, 1.0);
        let cols = synthetic_columns(z_true, p_true, 10);
        let msr = MsrMatrix::from_columns(cols.clone(), 0.0, 1).unwrap();
        let scaled: Vec<_> = cols
            .into_iter()
            .map(|(c, r)| (c.into_iter().map(|v| 7.5 * v).collect(), r))
            .collect();
        let msr2 = MsrMatrix::from_columns(scaled, 0.0, 1).unwrap();
        let grid = make_search_grid(Rect::new(2.0, 6.0, 1.0, 4.0).unwrap(), 0.25, &[]).unwrap();
        let (e1, _) = music_localize(&msr, &grid, 1).unwrap();
        let (e2, _) = music_localize(&msr2, &grid, 1).unwrap();
        assert_eq!(e1.grid_peak, e2.grid_peak);
    }

    #[test]
    fn exact_moment_recovery_when_phi_in_range() {
        // With one position and data equal to A(z) p, Phi_1 is proportional
        // to A p and the least-squares fit returns p up to scale.
        let z_true = Vec2::new(4.0, 2.5);
        let p_true = Vec2::new(1.0, 0.4);
        let msr = MsrMatrix::from_columns(synthetic_columns(z_true, p_true, 1), 0.0, 1).unwrap();
        let grid = make_search_grid(Rect::new(3.9, 4.1, 2.4, 2.6).unwrap(), 0.1, &[]).unwrap();
        let (est, _) = music_localize(&msr, &grid, 1).unwrap();
        assert!(est.residual < 1e-12, "residual {}", est.residual);
        let cosang = est.heading_hat.dot(&(p_true / p_true.norm()));
        assert!(cosang.abs() > 1.0 - 1e-10);
    }

    #[test]
    fn collinear_receptors_rejected() {
        // Receptors on a line through z make the lead field rank one.
        let z = Vec2::new(0.0, 0.0);
        let rec: Vec<(Vec2, Vec2)> = (1..7)
            .map(|k| (Vec2::new(k as f64, 0.0), Vec2::new(0.0, 1.0)))
            .collect();
        let phi = DVector::from_fn(rec.len(), |l, _| 1.0 / (l + 1) as f64);
        match fit_moment(z, &rec, &phi) {
            Err(Error::LocalizationFailed(_)) => {}
            other => panic!("expected rank deficiency error, got {other:?}"),
        }
    }

    #[test]
    fn empty_grid_rejected() {
        let msr =
            MsrMatrix::from_columns(synthetic_columns(Vec2::new(4.0, 2.5), Vec2::new(1.0, 0.0), 3), 0.0, 1)
                .unwrap();
        let fish = FishSpec::standard(Vec2::new(0.5, 0.5), Vec2::new(1.0, 0.0), 0.3, wave()).unwrap();
        let grid = make_search_grid(Rect::new(0.4, 0.6, 0.4, 0.6).unwrap(), 0.1, &[&fish]).unwrap();
        assert!(music_localize(&msr, &grid, 1).is_err());
    }

    #[test]
    fn noise_is_reproducible_and_scaled_by_range() {
        let cols = synthetic_columns(Vec2::new(4.0, 2.5), Vec2::new(1.0, 0.0), 40);
        let a = MsrMatrix::from_columns(cols.clone(), 0.1, 42).unwrap();
        let b = MsrMatrix::from_columns(cols.clone(), 0.1, 42).unwrap();
        assert_eq!(a.data, b.data);
        let c = MsrMatrix::from_columns(cols.clone(), 0.1, 43).unwrap();
        assert!(a.data != c.data);
        let zero = MsrMatrix::from_columns(cols, 0.0, 42).unwrap();
        assert_eq!(zero.data, zero.clean);
    }

    #[test]
    fn noise_variance_matches_contract() {
        // Sample variance of the injected noise over >= 1e4 entries.
        let n_pos = 840; // 12 receptors x 840 positions = 10080 entries
        let cols = synthetic_columns(Vec2::new(4.0, 2.5), Vec2::new(1.0, 0.0), n_pos);
        let msr = MsrMatrix::from_columns(cols, 0.05, 7).unwrap();
        let x = &msr.data - &msr.clean;
        let n = (x.nrows() * x.ncols()) as f64;
        let mean: f64 = x.iter().sum::<f64>() / n;
        let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let expect = msr.sigma_noise * msr.sigma_noise;
        assert!(
            (var - expect).abs() / expect < 0.05,
            "variance {var} vs {expect}"
        );
    }
}
