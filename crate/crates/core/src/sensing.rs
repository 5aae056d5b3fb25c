//! Active electro-sensing of a small dielectric target near a conspecific.
//!
//! The target's leading-order signature on the active fish's skin is a
//! dipole field weighted by the first-order polarization tensor. Since the
//! background potential is real, the imaginary part of the skin current
//! isolates the target, and applying the post-processing operator
//! `P = I/2 - K* - xi dD/dnu` converts the body-reflected kernel into the
//! free-space one. Stacking post-processed data over frequencies gives the
//! SFR matrix; its leading left-singular subspace drives the localizer
//! `I_1(z) = 1 / |(I - P) g(z)/|g(z)||`.

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::comm::refine_peak;
use crate::error::{Error, Result};
use crate::forward::{self, ForwardOptions, ForwardSolution, FrequencySweep, Scene};
use crate::geometry::{interp_periodic, receptor_params, BoundaryMesh, SearchGrid, Vec2};
use crate::potential::{self, SelfOperators};

/// First-order polarization tensor of a reference shape `B` at contrast
/// parameter `lambda`.
#[derive(Debug, Clone)]
pub struct PolarizationTensor {
    pub m: Matrix2<Complex64>,
    pub lambda: Complex64,
}

impl PolarizationTensor {
    pub fn is_symmetric(&self, tol: f64) -> bool {
        (self.m[(0, 1)] - self.m[(1, 0)]).norm() <= tol
    }

    pub fn imag(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.m[(0, 0)].im,
            self.m[(0, 1)].im,
            self.m[(1, 0)].im,
            self.m[(1, 1)].im,
        )
    }
}

/// Compute `m_ij = int_B y_i (lambda I - K*_B)^{-1}[nu_j] ds` by a dense
/// complex resolvent solve on the boundary of `B`.
pub fn polarization_tensor(lambda: Complex64, b_mesh: &BoundaryMesh) -> Result<PolarizationTensor> {
    let n = b_mesh.n_panels();
    let kstar = potential::assemble_k_star_self(b_mesh)?.matrix;
    let mut resolvent = DMatrix::<Complex64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            resolvent[(i, j)] = Complex64::new(-kstar[(i, j)], 0.0);
        }
        resolvent[(i, i)] += lambda;
    }
    let lu = resolvent.lu();
    let mut m = Matrix2::<Complex64>::zeros();
    for jcol in 0..2 {
        let rhs = DVector::<Complex64>::from_fn(n, |i, _| {
            Complex64::new(b_mesh.normals[i][jcol], 0.0)
        });
        let phi = lu.solve(&rhs).ok_or_else(|| {
            Error::SingularSystem("lambda lies in the spectrum of K*".into())
        })?;
        for irow in 0..2 {
            let mut acc = Complex64::new(0.0, 0.0);
            for q in 0..n {
                acc += phi[q] * (b_mesh.weights[q] * b_mesh.points[q][irow]);
            }
            m[(irow, jcol)] = acc;
        }
    }
    Ok(PolarizationTensor { m, lambda })
}

/// Post-processing matrix `P = I/2 - K* + xi T` on a fish boundary.
///
/// With the exterior representation `u = H + (S - xi D)[psi] + S_D[phi]`,
/// the exterior Neumann trace gives the exact identity
/// `P[psi] = d(S_D[phi])/dnu` on the skin: applying `P` to measured skin
/// currents strips every body-reflection term and leaves the free-space
/// field of the target density alone. (The sign of the hypersingular term
/// follows this crate's double-layer orientation.)
pub fn postprocess_matrix(ops: &SelfOperators, xi: f64) -> DMatrix<f64> {
    let n = ops.k_star.nrows();
    let mut p = -&ops.k_star + xi * &ops.t;
    for i in 0..n {
        p[(i, i)] += 0.5;
    }
    p
}

/// Apply the post-processing operator to a data vector on the boundary.
pub fn postprocess_data(data: &[f64], ops: &SelfOperators, xi: f64) -> Vec<f64> {
    let p = postprocess_matrix(ops, xi);
    let mut out = vec![0.0; data.len()];
    for (j, d) in data.iter().enumerate() {
        if *d == 0.0 {
            continue;
        }
        for i in 0..data.len() {
            out[i] += p[(i, j)] * d;
        }
    }
    out
}

/// Dipole kernel weights at a candidate point: `w_l = grad_z (dGamma/dnu_x)
/// (x_l, z)` for each receptor `l`.
pub fn dipole_kernel_rows(z: Vec2, receptors: &[(Vec2, Vec2)]) -> Vec<Vec2> {
    receptors
        .iter()
        .map(|(x, nu)| potential::grad_z_adjoint_kernel(*x, z, *nu))
        .collect()
}

/// Illumination vector `g(z)_l = grad U(z) . grad_z (dGamma/dnu_x)(x_l, z)`
/// built from the fish-alone background solution.
pub fn illumination_vector(
    z: Vec2,
    background: &ForwardSolution,
    receptors: &[(Vec2, Vec2)],
) -> Result<Vec<f64>> {
    if !background.is_exterior(z) {
        return Err(Error::InvalidParameter(
            "illumination point lies inside a fish body".into(),
        ));
    }
    if receptors.iter().any(|(x, _)| (x - z).norm() == 0.0) {
        return Err(Error::InvalidParameter(
            "illumination point coincides with a receptor".into(),
        ));
    }
    let g = background.eval_grad(z);
    let gu = Vec2::new(g[0].re, g[1].re);
    Ok(dipole_kernel_rows(z, receptors)
        .into_iter()
        .map(|w| gu.dot(&w))
        .collect())
}

/// Spectral (multi-frequency) response matrix of post-processed imaginary
/// skin-current data: receptors x frequencies.
#[derive(Debug, Clone)]
pub struct SfrMatrix {
    pub data: DMatrix<f64>,
    pub clean: DMatrix<f64>,
    pub receptors: Vec<(Vec2, Vec2)>,
    pub frequencies: Vec<f64>,
    pub sigma0: f64,
    pub sigma_noise: f64,
    pub seed: u64,
}

impl SfrMatrix {
    pub fn with_noise(mut self, sigma0: f64, seed: u64) -> Result<SfrMatrix> {
        if sigma0 < 0.0 {
            return Err(Error::InvalidParameter("noise level must be nonnegative".into()));
        }
        let range = self.clean.max() - self.clean.min();
        let sigma_noise = range * sigma0;
        let mut data = self.clean.clone();
        if sigma_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma_noise)
                .map_err(|e| Error::InvalidParameter(format!("bad noise distribution: {e}")))?;
            for c in 0..data.ncols() {
                for r in 0..data.nrows() {
                    data[(r, c)] += normal.sample(&mut rng);
                }
            }
        }
        self.data = data;
        self.sigma0 = sigma0;
        self.sigma_noise = sigma_noise;
        self.seed = seed;
        Ok(self)
    }
}

/// Build the SFR for a scene whose target responds across `frequencies`;
/// the measuring fish is `active`, any conspecific stays electrically
/// silent (its body still scatters).
pub fn build_sfr(
    scene: &Scene,
    active: usize,
    frequencies: &[f64],
    opts: &ForwardOptions,
    sigma0: f64,
    seed: u64,
) -> Result<SfrMatrix> {
    if frequencies.is_empty() {
        return Err(Error::InvalidParameter("frequency sweep is empty".into()));
    }
    let sweep = FrequencySweep::new(scene, active, opts)?;
    let fish = &scene.fish[active];
    let mesh = fish.mesh(opts.n_panels_fish)?;
    let ops = forward::ops_for_shape(fish.semiaxis_a, fish.semiaxis_b, opts.n_panels_fish)?;
    let params = receptor_params(&mesh, fish.n_receptors)?;
    let receptors = fish.receptors(&mesh)?;

    let columns: Vec<Vec<f64>> = frequencies
        .par_iter()
        .map(|omega| -> Result<Vec<f64>> {
            let sol = sweep.solve_at(*omega)?;
            let im_psi: Vec<f64> = sol.bodies[active].psi.iter().map(|p| p.im).collect();
            let processed = postprocess_data(&im_psi, &ops, fish.xi);
            Ok(params.iter().map(|t| interp_periodic(&processed, *t)).collect())
        })
        .collect::<Result<_>>()?;

    let n_r = receptors.len();
    let mut clean = DMatrix::<f64>::zeros(n_r, frequencies.len());
    for (c, col) in columns.iter().enumerate() {
        for r in 0..n_r {
            clean[(r, c)] = col[r];
        }
    }
    SfrMatrix {
        data: clean.clone(),
        clean,
        receptors,
        frequencies: frequencies.to_vec(),
        sigma0: 0.0,
        sigma_noise: 0.0,
        seed,
    }
    .with_noise(sigma0, seed)
}

/// Result of the multi-frequency target search.
#[derive(Debug, Clone)]
pub struct SenseEstimate {
    pub z_hat: Vec2,
    pub grid_peak: Vec2,
    pub localizer_peak: f64,
    /// Least-squares fit of the imaginary polarization tensor at `z_hat`,
    /// taken at the strongest frequency column.
    pub im_m: Matrix2<f64>,
    pub fitted_frequency: f64,
    pub signal_dim: usize,
}

/// Projector rank: number of singular values within 10% of the largest,
/// capped at 2 (the rank of the dipole model).
fn signal_dimension(singular_values: &[f64]) -> usize {
    if singular_values.is_empty() {
        return 1;
    }
    let smax = singular_values[0];
    let dim = singular_values
        .iter()
        .filter(|s| **s >= 0.1 * smax)
        .count();
    dim.clamp(1, 2)
}

/// Evaluate the localizer map `I_1` and locate its peak.
pub fn sense_localize(
    sfr: &SfrMatrix,
    background: &ForwardSolution,
    grid: &SearchGrid,
) -> Result<(SenseEstimate, Vec<f64>)> {
    let svd = nalgebra::SVD::new(sfr.data.clone(), true, false);
    let u = svd
        .u
        .as_ref()
        .ok_or_else(|| Error::SingularSystem("SVD of the SFR failed".into()))?;
    let mut sv: Vec<(usize, f64)> = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .collect();
    sv.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let svals: Vec<f64> = sv.iter().map(|(_, s)| *s).collect();
    if !(svals[0] > 0.0) {
        return Err(Error::SingularSystem("SFR is identically zero".into()));
    }
    let dim = signal_dimension(&svals);
    let n_r = sfr.data.nrows();
    // P = sum of outer products of the leading left singular vectors.
    let mut proj = DMatrix::<f64>::zeros(n_r, n_r);
    for k in 0..dim {
        let col = u.column(sv[k].0);
        for i in 0..n_r {
            for j in 0..n_r {
                proj[(i, j)] += col[i] * col[j];
            }
        }
    }

    let map: Vec<f64> = grid
        .points
        .par_iter()
        .zip(grid.excluded.par_iter())
        .map(|(z, excluded)| {
            if *excluded {
                return f64::NAN;
            }
            let g = match illumination_vector(*z, background, &sfr.receptors) {
                Ok(g) => g,
                Err(_) => return f64::NAN,
            };
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return f64::NAN;
            }
            let mut out = 0.0;
            for i in 0..n_r {
                let mut pg = 0.0;
                for j in 0..n_r {
                    pg += proj[(i, j)] * g[j];
                }
                let res = g[i] / norm - pg / norm;
                out += res * res;
            }
            1.0 / out.sqrt().max(1e-300)
        })
        .collect();

    let mut best_idx = None;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in map.iter().enumerate() {
        if v.is_finite() && *v > best_val {
            best_val = *v;
            best_idx = Some(i);
        }
    }
    let best_idx =
        best_idx.ok_or_else(|| Error::LocalizationFailed("localizer map has no finite peak".into()))?;
    let z_hat = refine_peak(grid, &map, best_idx);

    // Fit Im M at the strongest frequency column.
    let mut best_col = 0;
    let mut best_norm = -1.0;
    for c in 0..sfr.data.ncols() {
        let n = sfr.data.column(c).norm();
        if n > best_norm {
            best_norm = n;
            best_col = c;
        }
    }
    let col: Vec<f64> = sfr.data.column(best_col).iter().copied().collect();
    let im_m = fit_im_polarization(&col, z_hat, &sfr.receptors, background, 1.0)?;

    Ok((
        SenseEstimate {
            z_hat,
            grid_peak: grid.points[best_idx],
            localizer_peak: best_val,
            im_m,
            fitted_frequency: sfr.frequencies[best_col],
            signal_dim: dim,
        },
        map,
    ))
}

/// Least-squares fit of the symmetric 2x2 tensor `N` in the dipole model
/// `d_l = delta^2 w_l^T N grad U(z)`; with `delta = 1` the result absorbs
/// the `delta^2` scale.
///
/// A single illumination direction only determines the response vector
/// `N grad U(z)`, so the normal system is rank deficient by construction;
/// the fit returns the minimal-norm symmetric tensor via a truncated SVD.
pub fn fit_im_polarization(
    data: &[f64],
    z: Vec2,
    receptors: &[(Vec2, Vec2)],
    background: &ForwardSolution,
    delta: f64,
) -> Result<Matrix2<f64>> {
    let g = background.eval_grad(z);
    let gu = Vec2::new(g[0].re, g[1].re);
    let rows = dipole_kernel_rows(z, receptors);
    let n = receptors.len();
    let mut a = DMatrix::<f64>::zeros(n, 3);
    let d2 = delta * delta;
    for (l, w) in rows.iter().enumerate() {
        a[(l, 0)] = d2 * w.x * gu.x;
        a[(l, 1)] = d2 * (w.x * gu.y + w.y * gu.x);
        a[(l, 2)] = d2 * w.y * gu.y;
    }
    let svd = nalgebra::SVD::new(a, true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return Err(Error::SingularSystem(
            "polarization fit is rank deficient (zero design matrix)".into(),
        ));
    }
    let sol = svd
        .solve(&DVector::from_column_slice(data), 1e-8 * smax)
        .map_err(|e| Error::SingularSystem(format!("polarization fit failed: {e}")))?;
    Ok(Matrix2::new(sol[0], sol[1], sol[1], sol[2]))
}

/// Observable part of the target response: the vector `Im M grad U(z)`
/// estimated by least squares from post-processed data.
pub fn fit_dipole_response(
    data: &[f64],
    z: Vec2,
    receptors: &[(Vec2, Vec2)],
) -> Result<Vec2> {
    let rows = dipole_kernel_rows(z, receptors);
    let n = receptors.len();
    let mut a = DMatrix::<f64>::zeros(n, 2);
    for (l, w) in rows.iter().enumerate() {
        a[(l, 0)] = w.x;
        a[(l, 1)] = w.y;
    }
    let ata = a.transpose() * &a;
    let det = ata[(0, 0)] * ata[(1, 1)] - ata[(0, 1)] * ata[(1, 0)];
    if det.abs() < 1e-12 * (ata[(0, 0)] + ata[(1, 1)]).powi(2).max(1e-300) {
        return Err(Error::SingularSystem("dipole response fit is rank deficient".into()));
    }
    let atd = a.transpose() * DVector::from_column_slice(data);
    let inv = Matrix2::new(ata[(1, 1)], -ata[(0, 1)], -ata[(1, 0)], ata[(0, 0)]) / det;
    let q = inv * nalgebra::Vector2::new(atd[0], atd[1]);
    Ok(Vec2::new(q.x, q.y))
}

/// Full sensing pipeline: sweep frequencies, post-process, build the SFR,
/// and localize the target on the grid.
pub fn sense_target(
    scene: &Scene,
    active: usize,
    frequencies: &[f64],
    opts: &ForwardOptions,
    sigma0: f64,
    seed: u64,
    grid: &SearchGrid,
) -> Result<(SenseEstimate, Vec<f64>, SfrMatrix)> {
    if scene.target.is_none() {
        return Err(Error::InvalidScene("sensing needs a target in the scene".into()));
    }
    let sfr = build_sfr(scene, active, frequencies, opts, sigma0, seed)?;
    let background = forward::solve_background(&scene.fish[active], opts)?;
    let (est, map) = sense_localize(&sfr, &background, grid)?;
    Ok((est, map, sfr))
}

/// Uniform frequency sweep used by the scenarios.
pub fn default_frequencies(n: usize) -> Vec<f64> {
    // Spans the band where the imaginary part of lambda is significant for
    // order-one permittivity contrasts.
    let (lo, hi) = (0.1, 10.0);
    (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n.max(2) - 1) as f64)
        .collect()
}
