//! Dense Nystrom discretizations of the 2D Laplace layer potentials.
//!
//! On a closed analytic curve the periodic trapezoidal rule is spectrally
//! accurate for smooth kernels; the logarithmic singularity of the single
//! layer is handled with the Kress (Martensen-Kussmaul) splitting, and the
//! hypersingular operator `d(D[phi])/dnu` is reduced to a single layer
//! acting on arclength derivatives (Maue identity), evaluated with the
//! periodic spectral differentiation matrix.
//!
//! Conventions follow the kernel `Gamma(x - y) = log|x - y| / (2*pi)`:
//! `D[1] = 1` inside, `0` outside, and the traces satisfy
//! `dS/dnu|± = (±1/2 I + K*)`, `D|± = (∓1/2 I + K)`.

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{BoundaryMesh, Vec2};

/// Fundamental solution `Gamma(x - y) = log||x - y|| / (2*pi)`.
pub fn gamma(x: Vec2, y: Vec2) -> Result<f64> {
    let r = (x - y).norm();
    if r == 0.0 {
        return Err(Error::InvalidParameter(
            "fundamental solution evaluated at coincident points".into(),
        ));
    }
    Ok(r.ln() / (2.0 * PI))
}

#[inline]
pub(crate) fn log_kernel(x: Vec2, y: Vec2) -> f64 {
    (x - y).norm().ln() / (2.0 * PI)
}

/// Gradient of `Gamma` with respect to its first argument.
#[inline]
pub fn grad_gamma(x: Vec2, y: Vec2) -> Vec2 {
    let d = x - y;
    d / (2.0 * PI * d.norm_squared())
}

/// Hessian of `Gamma` with respect to its first argument.
#[inline]
pub fn hess_gamma(x: Vec2, y: Vec2) -> Matrix2<f64> {
    let d = x - y;
    let r2 = d.norm_squared();
    let c = 1.0 / (2.0 * PI * r2);
    let q = 2.0 / r2;
    Matrix2::new(
        c * (1.0 - q * d.x * d.x),
        c * (-q * d.x * d.y),
        c * (-q * d.x * d.y),
        c * (1.0 - q * d.y * d.y),
    )
}

/// Double-layer kernel `dGamma/dnu_y(x, y) = nu(y).(y - x) / (2*pi*|x-y|^2)`.
#[inline]
pub fn dlayer_kernel(x: Vec2, y: Vec2, nu_y: Vec2) -> f64 {
    let d = y - x;
    nu_y.dot(&d) / (2.0 * PI * d.norm_squared())
}

/// Adjoint kernel `dGamma/dnu_x(x, y) = nu(x).(x - y) / (2*pi*|x-y|^2)`.
#[inline]
pub fn adjoint_kernel(x: Vec2, y: Vec2, nu_x: Vec2) -> f64 {
    let d = x - y;
    nu_x.dot(&d) / (2.0 * PI * d.norm_squared())
}

/// Gradient in `z` of `dGamma/dnu_x(x, z)`, i.e. the Hessian of `Gamma`
/// contracted with the receptor normal.
#[inline]
pub fn grad_z_adjoint_kernel(x: Vec2, z: Vec2, nu_x: Vec2) -> Vec2 {
    let d = x - z;
    let r2 = d.norm_squared();
    (-nu_x / r2 + d * (2.0 * nu_x.dot(&d) / (r2 * r2))) / (2.0 * PI)
}

/// A dense boundary operator: maps a density sampled at the source mesh
/// nodes to values at the observation nodes.
#[derive(Debug, Clone)]
pub struct BoundaryOperator {
    pub matrix: DMatrix<f64>,
    pub n_source: usize,
    pub n_obs: usize,
}

impl BoundaryOperator {
    fn from_matrix(matrix: DMatrix<f64>) -> BoundaryOperator {
        let (n_obs, n_source) = matrix.shape();
        BoundaryOperator {
            matrix,
            n_source,
            n_obs,
        }
    }

    pub fn apply(&self, density: &[Complex64]) -> Vec<Complex64> {
        apply_real_matrix(&self.matrix, density)
    }
}

/// Which side of the boundary a trace was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceSide {
    Interior,
    Exterior,
}

/// Complex panel data attached to one boundary.
#[derive(Debug, Clone)]
pub struct BoundaryField {
    pub values: Vec<Complex64>,
    pub side: TraceSide,
}

pub(crate) fn apply_real_matrix(m: &DMatrix<f64>, density: &[Complex64]) -> Vec<Complex64> {
    assert_eq!(m.ncols(), density.len());
    let mut out = vec![Complex64::new(0.0, 0.0); m.nrows()];
    for (j, d) in density.iter().enumerate() {
        if d.re == 0.0 && d.im == 0.0 {
            continue;
        }
        for i in 0..m.nrows() {
            out[i] += m[(i, j)] * d;
        }
    }
    out
}

/// Kress quadrature weights `R_j` for the periodic log kernel:
/// `int_0^{2pi} ln(4 sin^2((t_i - s)/2)) f(s) ds ~= sum_j R_{|i-j|} f(s_j)`.
fn kress_weights(n_panels: usize) -> Vec<f64> {
    let n = n_panels / 2;
    let mut r = Vec::with_capacity(n_panels);
    for j in 0..n_panels {
        let tj = PI * j as f64 / n as f64;
        let mut s = 0.0;
        for m in 1..n {
            s += (m as f64 * tj).cos() / m as f64;
        }
        r.push(-2.0 * PI / n as f64 * s - PI / (n as f64 * n as f64) * (n as f64 * tj).cos());
    }
    r
}

/// Periodic spectral differentiation matrix on `n` equispaced nodes
/// (`n` even): maps nodal values to nodal derivatives in the parameter.
pub fn spectral_diff_matrix(n: usize) -> DMatrix<f64> {
    assert!(n % 2 == 0, "spectral differentiation needs an even node count");
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let k = i as isize - j as isize;
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                let arg = PI * k as f64 / n as f64;
                d[(i, j)] = 0.5 * sign / arg.tan();
            }
        }
    }
    d
}

fn require_closed(mesh: &BoundaryMesh) -> Result<()> {
    if !mesh.closed {
        return Err(Error::InvalidGeometry(
            "on-boundary operators need a closed mesh".into(),
        ));
    }
    Ok(())
}

/// On-boundary single layer with the Kress log-singular rule.
pub fn assemble_single_layer_self(mesh: &BoundaryMesh) -> Result<BoundaryOperator> {
    require_closed(mesh)?;
    let n = mesh.n_panels();
    let r = kress_weights(n);
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let ti = mesh.param(i);
        for j in 0..n {
            let log_part = r[(i as isize - j as isize).unsigned_abs() % n] * mesh.speed[j] / (4.0 * PI);
            let smooth = if i == j {
                mesh.speed[i].ln()
            } else {
                let tj = mesh.param(j);
                let chord = (mesh.points[i] - mesh.points[j]).norm();
                (chord / (2.0 * (0.5 * (ti - tj)).sin().abs())).ln()
            };
            m[(i, j)] = log_part + mesh.weights[j] * smooth / (2.0 * PI);
        }
    }
    Ok(BoundaryOperator::from_matrix(m))
}

/// On-boundary Neumann-Poincare operator `K` (the principal value trace of
/// the double layer); smooth kernel with diagonal limit `kappa/(4*pi)`.
pub fn assemble_k_self(mesh: &BoundaryMesh) -> Result<BoundaryOperator> {
    require_closed(mesh)?;
    let n = mesh.n_panels();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let k = if i == j {
                mesh.curvature[i] / (4.0 * PI)
            } else {
                dlayer_kernel(mesh.points[i], mesh.points[j], mesh.normals[j])
            };
            m[(i, j)] = mesh.weights[j] * k;
        }
    }
    Ok(BoundaryOperator::from_matrix(m))
}

/// On-boundary adjoint operator `K*`; same diagonal limit as `K`.
pub fn assemble_k_star_self(mesh: &BoundaryMesh) -> Result<BoundaryOperator> {
    require_closed(mesh)?;
    let n = mesh.n_panels();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let k = if i == j {
                mesh.curvature[i] / (4.0 * PI)
            } else {
                adjoint_kernel(mesh.points[i], mesh.points[j], mesh.normals[i])
            };
            m[(i, j)] = mesh.weights[j] * k;
        }
    }
    Ok(BoundaryOperator::from_matrix(m))
}

/// Hypersingular operator `T = d(D[phi])/dnu` via the Maue identity
/// `T[phi] = d/ds S[dphi/ds]`, with arclength derivatives taken spectrally.
pub fn assemble_hypersingular_self(mesh: &BoundaryMesh) -> Result<BoundaryOperator> {
    require_closed(mesh)?;
    let n = mesh.n_panels();
    let s = assemble_single_layer_self(mesh)?.matrix;
    let dt = spectral_diff_matrix(n);
    // d/ds = diag(1/|x'|) d/dt
    let mut ds = dt;
    for i in 0..n {
        let inv = 1.0 / mesh.speed[i];
        for j in 0..n {
            ds[(i, j)] *= inv;
        }
    }
    let t = &ds * s * &ds;
    Ok(BoundaryOperator::from_matrix(t))
}

/// Single layer evaluated at off-boundary observation points.
pub fn assemble_single_layer_eval(mesh: &BoundaryMesh, obs: &[Vec2]) -> BoundaryOperator {
    let n = mesh.n_panels();
    let mut m = DMatrix::zeros(obs.len(), n);
    for (i, p) in obs.iter().enumerate() {
        for j in 0..n {
            m[(i, j)] = mesh.weights[j] * log_kernel(*p, mesh.points[j]);
        }
    }
    BoundaryOperator::from_matrix(m)
}

/// Double layer evaluated at off-boundary observation points.
pub fn assemble_double_layer_eval(mesh: &BoundaryMesh, obs: &[Vec2]) -> BoundaryOperator {
    let n = mesh.n_panels();
    let mut m = DMatrix::zeros(obs.len(), n);
    for (i, p) in obs.iter().enumerate() {
        for j in 0..n {
            m[(i, j)] = mesh.weights[j] * dlayer_kernel(*p, mesh.points[j], mesh.normals[j]);
        }
    }
    BoundaryOperator::from_matrix(m)
}

/// Normal derivative of the single layer at off-boundary points with
/// prescribed observation normals.
pub fn assemble_single_layer_nderiv_eval(
    mesh: &BoundaryMesh,
    obs: &[Vec2],
    obs_normals: &[Vec2],
) -> BoundaryOperator {
    let n = mesh.n_panels();
    let mut m = DMatrix::zeros(obs.len(), n);
    for (i, p) in obs.iter().enumerate() {
        for j in 0..n {
            m[(i, j)] = mesh.weights[j] * adjoint_kernel(*p, mesh.points[j], obs_normals[i]);
        }
    }
    BoundaryOperator::from_matrix(m)
}

/// Normal derivative of the double layer at off-boundary points.
pub fn assemble_double_layer_nderiv_eval(
    mesh: &BoundaryMesh,
    obs: &[Vec2],
    obs_normals: &[Vec2],
) -> BoundaryOperator {
    let n = mesh.n_panels();
    let mut m = DMatrix::zeros(obs.len(), n);
    for (i, p) in obs.iter().enumerate() {
        for j in 0..n {
            let g = grad_dlayer_kernel(*p, mesh.points[j], mesh.normals[j]);
            m[(i, j)] = mesh.weights[j] * obs_normals[i].dot(&g);
        }
    }
    BoundaryOperator::from_matrix(m)
}

/// Gradient in `x` of the double-layer kernel `dGamma/dnu_y(x, y)`.
#[inline]
pub fn grad_dlayer_kernel(x: Vec2, y: Vec2, nu_y: Vec2) -> Vec2 {
    let d = x - y;
    let r2 = d.norm_squared();
    (-nu_y / r2 - d * (2.0 * nu_y.dot(&(-d)) / (r2 * r2))) / (2.0 * PI)
}

/// Evaluate `S[density]` at a single off-boundary point.
pub fn eval_single_layer(mesh: &BoundaryMesh, density: &[Complex64], p: Vec2) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..mesh.n_panels() {
        acc += density[j] * (mesh.weights[j] * log_kernel(p, mesh.points[j]));
    }
    acc
}

/// Evaluate `D[density]` at a single off-boundary point.
pub fn eval_double_layer(mesh: &BoundaryMesh, density: &[Complex64], p: Vec2) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..mesh.n_panels() {
        acc += density[j]
            * (mesh.weights[j] * dlayer_kernel(p, mesh.points[j], mesh.normals[j]));
    }
    acc
}

/// Gradient of `S[density]` at an off-boundary point.
pub fn eval_single_layer_grad(
    mesh: &BoundaryMesh,
    density: &[Complex64],
    p: Vec2,
) -> [Complex64; 2] {
    let mut gx = Complex64::new(0.0, 0.0);
    let mut gy = Complex64::new(0.0, 0.0);
    for j in 0..mesh.n_panels() {
        let g = grad_gamma(p, mesh.points[j]) * mesh.weights[j];
        gx += density[j] * g.x;
        gy += density[j] * g.y;
    }
    [gx, gy]
}

/// Gradient of `D[density]` at an off-boundary point.
pub fn eval_double_layer_grad(
    mesh: &BoundaryMesh,
    density: &[Complex64],
    p: Vec2,
) -> [Complex64; 2] {
    let mut gx = Complex64::new(0.0, 0.0);
    let mut gy = Complex64::new(0.0, 0.0);
    for j in 0..mesh.n_panels() {
        let g = grad_dlayer_kernel(p, mesh.points[j], mesh.normals[j]) * mesh.weights[j];
        gx += density[j] * g.x;
        gy += density[j] * g.y;
    }
    [gx, gy]
}

/// Cached on-boundary operators for one body shape. The kernels are rigid
/// motion invariant, so a single assembly serves every pose of the body.
#[derive(Debug, Clone)]
pub struct SelfOperators {
    pub s: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub k_star: DMatrix<f64>,
    pub t: DMatrix<f64>,
}

impl SelfOperators {
    pub fn assemble(mesh: &BoundaryMesh) -> Result<SelfOperators> {
        let s = assemble_single_layer_self(mesh)?.matrix;
        let k = assemble_k_self(mesh)?.matrix;
        let k_star = assemble_k_star_self(mesh)?.matrix;
        let n = mesh.n_panels();
        let dt = spectral_diff_matrix(n);
        let mut ds = dt;
        for i in 0..n {
            let inv = 1.0 / mesh.speed[i];
            for j in 0..n {
                ds[(i, j)] *= inv;
            }
        }
        let t = &ds * &s * &ds;
        Ok(SelfOperators { s, k, k_star, t })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_ellipse_mesh;
    use approx::assert_relative_eq;

    fn circle(n: usize) -> BoundaryMesh {
        make_ellipse_mesh(1.0, 1.0, Vec2::zeros(), Vec2::new(1.0, 0.0), n).unwrap()
    }

    fn ellipse(n: usize) -> BoundaryMesh {
        make_ellipse_mesh(2.0, 0.3, Vec2::new(0.4, -0.2), Vec2::new(0.8, 0.6), n).unwrap()
    }

    fn cvec(v: &[f64]) -> Vec<Complex64> {
        v.iter().map(|x| Complex64::new(*x, 0.0)).collect()
    }

    #[test]
    fn gamma_values() {
        let o = Vec2::zeros();
        assert_relative_eq!(gamma(Vec2::new(1.0, 0.0), o).unwrap(), 0.0);
        assert_relative_eq!(
            gamma(Vec2::new(std::f64::consts::E, 0.0), o).unwrap(),
            1.0 / (2.0 * PI),
            epsilon = 1e-14
        );
        assert_relative_eq!(
            gamma(Vec2::new(0.0, 2.0), o).unwrap(),
            2.0_f64.ln() / (2.0 * PI),
            epsilon = 1e-14
        );
        assert!(gamma(o, o).is_err());
    }

    #[test]
    fn single_layer_of_unit_density_on_circle() {
        // S[1](x) = log|x| outside the unit disk, 0 on the circle.
        let m = circle(256);
        let ones = cvec(&vec![1.0; 256]);
        let v = eval_single_layer(&m, &ones, Vec2::new(2.0, 0.0));
        assert!((v.re - 2.0_f64.ln()).abs() < 1e-6, "got {v}");
        assert!(v.im.abs() < 1e-14);

        let s = assemble_single_layer_self(&m).unwrap();
        let on = s.apply(&ones);
        for v in on {
            assert!(v.norm() < 1e-4, "S[1] on circle should vanish, got {v}");
        }

        let zero = cvec(&vec![0.0; 256]);
        for v in s.apply(&zero) {
            assert_eq!(v.norm(), 0.0);
        }
    }

    #[test]
    fn single_layer_circle_modes() {
        // S[cos(m t)] = -cos(m t)/(2m) on the unit circle.
        let n = 256;
        let m = circle(n);
        let s = assemble_single_layer_self(&m).unwrap();
        for mode in [1usize, 3, 8] {
            let dens: Vec<Complex64> = (0..n)
                .map(|j| Complex64::new((mode as f64 * m.param(j)).cos(), 0.0))
                .collect();
            let out = s.apply(&dens);
            for j in 0..n {
                let expect = -(mode as f64 * m.param(j)).cos() / (2.0 * mode as f64);
                assert!(
                    (out[j].re - expect).abs() < 1e-10,
                    "mode {mode} node {j}: {} vs {}",
                    out[j].re,
                    expect
                );
            }
        }
    }

    #[test]
    fn k_star_on_circle_is_rank_one() {
        // The K* kernel is identically 1/(4 pi) on the unit circle.
        let n = 128;
        let m = circle(n);
        let ks = assemble_k_star_self(&m).unwrap();
        let dens: Vec<Complex64> = (0..n)
            .map(|j| Complex64::new(1.0 + (m.param(j)).sin(), 0.0))
            .collect();
        let mean: Complex64 = dens
            .iter()
            .zip(&m.weights)
            .map(|(d, w)| d * *w)
            .sum::<Complex64>()
            / (4.0 * PI);
        for v in ks.apply(&dens) {
            assert!((v - mean).norm() < 1e-8);
        }
        // Mean-free density is annihilated.
        let dens: Vec<Complex64> = (0..n)
            .map(|j| Complex64::new((2.0 * m.param(j)).cos(), 0.0))
            .collect();
        for v in ks.apply(&dens) {
            assert!(v.norm() < 1e-8);
        }
    }

    #[test]
    fn k_star_disk_spectrum() {
        let n = 128;
        let m = circle(n);
        let ks = assemble_k_star_self(&m).unwrap();
        let eig = ks.matrix.complex_eigenvalues();
        let mut mods: Vec<f64> = eig.iter().map(|z| z.norm()).collect();
        mods.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((mods[0] - 0.5).abs() < 1e-6, "largest eigenvalue {}", mods[0]);
        assert!(mods[1] < 1e-6, "second eigenvalue {}", mods[1]);
    }

    #[test]
    fn gauss_identity_for_double_layer() {
        let m = ellipse(256);
        let ones = cvec(&vec![1.0; 256]);
        let inside = eval_double_layer(&m, &ones, Vec2::new(0.4, -0.2));
        let outside = eval_double_layer(&m, &ones, Vec2::new(6.0, 5.0));
        assert!((inside.re - 1.0).abs() < 1e-8, "D[1] inside = {inside}");
        assert!(outside.norm() < 1e-8, "D[1] outside = {outside}");
    }

    #[test]
    fn hypersingular_circle_modes() {
        // T[cos(m t)] = (m/2) cos(m t) on the unit circle.
        let n = 128;
        let m = circle(n);
        let t = assemble_hypersingular_self(&m).unwrap();
        for mode in [1usize, 2, 5] {
            let dens: Vec<Complex64> = (0..n)
                .map(|j| Complex64::new((mode as f64 * m.param(j)).cos(), 0.0))
                .collect();
            let out = t.apply(&dens);
            for j in 0..n {
                let expect = 0.5 * mode as f64 * (mode as f64 * m.param(j)).cos();
                assert!(
                    (out[j].re - expect).abs() < 1e-8,
                    "mode {mode}: {} vs {expect}",
                    out[j].re
                );
            }
        }
    }

    #[test]
    fn spectral_diff_differentiates_trig() {
        let n = 64;
        let d = spectral_diff_matrix(n);
        let vals: Vec<f64> = (0..n).map(|j| (3.0 * 2.0 * PI * j as f64 / n as f64).cos()).collect();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += d[(i, j)] * vals[j];
            }
            let t = 2.0 * PI * i as f64 / n as f64;
            assert!((acc + 3.0 * (3.0 * t).sin()).abs() < 1e-10);
        }
    }

    #[test]
    fn calderon_identities_on_ellipse() {
        // K S = S K* and S T = K^2 - I/4 hold exactly for the continuous
        // operators; checked on band-limited densities (the hypersingular
        // route loses only the Nyquist mode to spectral truncation).
        let m = ellipse(256);
        let n = m.n_panels();
        let ops = SelfOperators::assemble(&m).unwrap();
        let lhs = &ops.k * &ops.s;
        let rhs = &ops.s * &ops.k_star;
        let r1 = (&lhs - &rhs).abs().max();
        assert!(r1 < 1e-8, "||KS - SK*|| = {r1}");

        let dens: Vec<Complex64> = (0..n)
            .map(|j| {
                let t = m.param(j);
                Complex64::new(1.0 + (3.0 * t).cos() - 0.4 * (7.0 * t).sin(), 0.0)
            })
            .collect();
        let st = apply_real_matrix(&ops.s, &apply_real_matrix(&ops.t, &dens));
        let kk = apply_real_matrix(&ops.k, &apply_real_matrix(&ops.k, &dens));
        for j in 0..n {
            let r = (st[j] - kk[j] + 0.25 * dens[j]).norm();
            assert!(r < 1e-8, "Calderon residual {r} at node {j}");
        }
    }

    /// Green-identity trace residuals with analytic harmonic data; these
    /// exercise every on-boundary operator against exact Cauchy pairs.
    #[test]
    fn green_trace_identities() {
        for mesh in [circle(512), ellipse(512)] {
            let n = mesh.n_panels();
            let ops = SelfOperators::assemble(&mesh).unwrap();

            // Interior harmonic: point source outside the body.
            let y0 = Vec2::new(5.0, 4.0);
            let w: Vec<Complex64> = (0..n)
                .map(|j| Complex64::new(log_kernel(mesh.points[j], y0), 0.0))
                .collect();
            let dw: Vec<Complex64> = (0..n)
                .map(|j| {
                    Complex64::new(
                        grad_gamma(mesh.points[j], y0).dot(&mesh.normals[j]),
                        0.0,
                    )
                })
                .collect();
            let kw = apply_real_matrix(&ops.k, &w);
            let sdw = apply_real_matrix(&ops.s, &dw);
            let tw = apply_real_matrix(&ops.t, &w);
            let ksdw = apply_real_matrix(&ops.k_star, &dw);
            for j in 0..n {
                let ra = (kw[j] - 0.5 * w[j] - sdw[j]).norm();
                let rb = (tw[j] - 0.5 * dw[j] - ksdw[j]).norm();
                assert!(ra < 1e-8, "interior Dirichlet trace residual {ra}");
                assert!(rb < 1e-6, "interior Neumann trace residual {rb}");
            }

            // Exterior harmonic with decay: opposite point sources inside.
            let y0 = Vec2::new(0.45, -0.15);
            let y1 = Vec2::new(0.35, -0.25);
            let w: Vec<Complex64> = (0..n)
                .map(|j| {
                    Complex64::new(
                        log_kernel(mesh.points[j], y0) - log_kernel(mesh.points[j], y1),
                        0.0,
                    )
                })
                .collect();
            let dw: Vec<Complex64> = (0..n)
                .map(|j| {
                    Complex64::new(
                        (grad_gamma(mesh.points[j], y0) - grad_gamma(mesh.points[j], y1))
                            .dot(&mesh.normals[j]),
                        0.0,
                    )
                })
                .collect();
            let kw = apply_real_matrix(&ops.k, &w);
            let sdw = apply_real_matrix(&ops.s, &dw);
            let tw = apply_real_matrix(&ops.t, &w);
            let ksdw = apply_real_matrix(&ops.k_star, &dw);
            for j in 0..n {
                let rc = (0.5 * w[j] + kw[j] - sdw[j]).norm();
                let rd = (ksdw[j] - 0.5 * dw[j] - tw[j]).norm();
                assert!(rc < 1e-8, "exterior Dirichlet trace residual {rc}");
                assert!(rd < 1e-6, "exterior Neumann trace residual {rd}");
            }
        }
    }

    #[test]
    fn hypersingular_continuous_across_boundary() {
        let mesh = ellipse(256);
        let n = mesh.n_panels();
        let dens: Vec<Complex64> = (0..n)
            .map(|j| Complex64::new((2.0 * mesh.param(j)).cos() + 0.3 * (mesh.param(j)).sin(), 0.0))
            .collect();
        let t = assemble_hypersingular_self(&mesh).unwrap();
        let tvals = t.apply(&dens);
        let i = 17;
        let x = mesh.points[i];
        let nu = mesh.normals[i];
        let mut diffs = Vec::new();
        for h in [0.4, 0.2, 0.1] {
            let gp = eval_double_layer_grad(&mesh, &dens, x + nu * h);
            let gm = eval_double_layer_grad(&mesh, &dens, x - nu * h);
            let dp = gp[0] * nu.x + gp[1] * nu.y;
            let dm = gm[0] * nu.x + gm[1] * nu.y;
            diffs.push((dp - dm).norm());
            // Both one-sided values approach the Maue value.
            assert!((dp - tvals[i]).norm() < 3.0 * h * (tvals[i].norm() + 1.0));
        }
        assert!(diffs[1] < diffs[0] && diffs[2] < diffs[1], "diffs {diffs:?}");
    }

    #[test]
    fn off_boundary_convergence_second_order_or_better() {
        // Compare S and D off-boundary against an adaptive quadrature oracle.
        let p = Vec2::new(2.6, 1.4);
        let dens_fn = |t: f64| (2.0 * t).cos() + 0.5;
        let oracle_s = {
            // adaptive Simpson on the smooth integrand
            let f = |t: f64| {
                let (st, ct) = t.sin_cos();
                let x = Vec2::new(2.0 * ct, 0.3 * st);
                let sp = ((2.0 * st).powi(2) + (0.3 * ct).powi(2)).sqrt();
                log_kernel(p, x) * dens_fn(t) * sp
            };
            adaptive_simpson(&f, 0.0, 2.0 * PI, 1e-13)
        };
        let err = |n: usize| {
            let mesh =
                make_ellipse_mesh(2.0, 0.3, Vec2::zeros(), Vec2::new(1.0, 0.0), n).unwrap();
            let dens: Vec<Complex64> = (0..n)
                .map(|j| Complex64::new(dens_fn(mesh.param(j)), 0.0))
                .collect();
            (eval_single_layer(&mesh, &dens, p).re - oracle_s).abs()
        };
        let (e16, e32) = (err(16), err(32));
        assert!(e32 <= e16 / 4.0 || e32 < 1e-12, "e16={e16}, e32={e32}");
    }

    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            if depth == 0 || (left + right - whole).abs() < 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, left, tol / 2.0, depth - 1) + rec(f, m, b, right, tol / 2.0, depth - 1)
            }
        }
        rec(f, a, b, simpson(f, a, b), tol, 40)
    }
}
