//! Forward transmission solver for scenes of fish with an optional small
//! dielectric target.
//!
//! Every fish body carries a thin resistive skin: the potential jumps by
//! `xi * du/dnu|+` across the boundary while the interior sees zero normal
//! flux and the active body's organ acts as an interior dipole source. The
//! exterior field is represented by `u = H + sum_i (S_i - xi_i D_i)[psi_i]
//! (+ S_D[phi_D])` with `psi_i = du/dnu|+`, and the unknowns are closed by
//! a per-body pair of boundary equations (exterior Dirichlet trace and the
//! interior Green trace identity), a per-body deflation scalar for the
//! Neumann kernel of `1/2 I - K`, and a per-body zero-flux constraint that
//! pins the logarithmic behaviour at infinity. Correctness is certified
//! through residuals, not through the block layout itself.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundaryMesh, FishSpec, MediumParams, TargetSpec, Vec2};
use crate::potential::{
    self, apply_real_matrix, BoundaryField, SelfOperators, TraceSide,
};

/// A full scene: fish bodies, an optional target, and the medium.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub fish: Vec<FishSpec>,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub medium: MediumParams,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.fish.is_empty() {
            return Err(Error::InvalidScene("scene needs at least one fish".into()));
        }
        self.medium.validate()?;
        // Pairwise disjoint bodies, checked on coarse boundary samples.
        let meshes: Vec<BoundaryMesh> = self
            .fish
            .iter()
            .map(|f| f.mesh(64))
            .collect::<Result<_>>()?;
        for i in 0..self.fish.len() {
            for j in 0..self.fish.len() {
                if i == j {
                    continue;
                }
                if meshes[i].points.iter().any(|p| self.fish[j].contains(*p))
                    || self.fish[j].contains(self.fish[i].center)
                {
                    return Err(Error::InvalidScene(format!(
                        "fish bodies {i} and {j} overlap"
                    )));
                }
            }
        }
        if let Some(t) = &self.target {
            for (i, f) in self.fish.iter().enumerate() {
                let d = f.boundary_distance(t.center, &meshes[i]);
                if f.contains(t.center) || d <= t.radius {
                    return Err(Error::InvalidScene(format!(
                        "target touches fish body {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Frequency-dependent material response `sigma + i*omega*eps`.
#[derive(Debug, Clone, Copy)]
pub struct Admittivity {
    pub sigma: f64,
    pub eps: f64,
}

impl Admittivity {
    pub fn gamma(&self, omega: f64) -> Complex64 {
        Complex64::new(self.sigma, omega * self.eps)
    }
}

/// Admittivity contrast `k(omega) = gamma_D / gamma_w` of a target.
pub fn contrast(target: &TargetSpec, medium: &MediumParams, omega: f64) -> Complex64 {
    let gd = Admittivity { sigma: target.sigma, eps: target.eps }.gamma(omega);
    let gw = Admittivity { sigma: medium.sigma, eps: medium.eps }.gamma(omega);
    gd / gw
}

/// Contrast parameter `lambda = (k + 1) / (2 (k - 1))`; undefined at `k = 1`.
pub fn lambda_from_contrast(k: Complex64) -> Result<Complex64> {
    if (k - Complex64::new(1.0, 0.0)).norm() < 1e-14 {
        return Err(Error::InvalidParameter(
            "contrast k = 1 makes the target invisible (degenerate lambda)".into(),
        ));
    }
    Ok((k + 1.0) / ((k - 1.0) * 2.0))
}

/// Discretization knobs for the forward solver.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub n_panels_fish: usize,
    pub n_panels_target: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            n_panels_fish: 128,
            n_panels_target: 64,
        }
    }
}

// The on-boundary operator matrices are invariant under rigid motions, so
// one assembly per (a, b, n_panels) shape serves every pose.
fn ops_cache() -> &'static Mutex<HashMap<(u64, u64, usize), Arc<SelfOperators>>> {
    static CACHE: OnceLock<Mutex<HashMap<(u64, u64, usize), Arc<SelfOperators>>>> =
        OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Cached on-boundary operators for an ellipse shape.
pub fn ops_for_shape(a: f64, b: f64, n_panels: usize) -> Result<Arc<SelfOperators>> {
    let key = (a.to_bits(), b.to_bits(), n_panels);
    if let Some(ops) = ops_cache().lock().unwrap().get(&key) {
        return Ok(ops.clone());
    }
    let mesh = crate::geometry::make_ellipse_mesh(a, b, Vec2::zeros(), Vec2::new(1.0, 0.0), n_panels)?;
    let ops = Arc::new(SelfOperators::assemble(&mesh)?);
    ops_cache().lock().unwrap().insert(key, ops.clone());
    Ok(ops)
}

/// Boundary data attached to one fish body after a solve.
#[derive(Debug, Clone)]
pub struct BodySolution {
    pub spec: FishSpec,
    pub mesh: BoundaryMesh,
    /// Exterior Neumann trace `du/dnu|+`.
    pub psi: Vec<Complex64>,
    /// Interior Dirichlet trace `u|-`.
    pub v: Vec<Complex64>,
    /// Deflation scalar; vanishes up to discretization error.
    pub aux: Complex64,
    pub ops: Arc<SelfOperators>,
}

impl BodySolution {
    pub fn u_plus(&self) -> Vec<Complex64> {
        self.psi
            .iter()
            .zip(&self.v)
            .map(|(p, v)| v + self.spec.xi * p)
            .collect()
    }

    pub fn u_plus_field(&self) -> BoundaryField {
        BoundaryField { values: self.u_plus(), side: TraceSide::Exterior }
    }

    pub fn u_minus_field(&self) -> BoundaryField {
        BoundaryField { values: self.v.clone(), side: TraceSide::Interior }
    }

    pub fn neumann_field(&self) -> BoundaryField {
        BoundaryField { values: self.psi.clone(), side: TraceSide::Exterior }
    }
}

/// Boundary data attached to the target after a solve.
#[derive(Debug, Clone)]
pub struct TargetSolution {
    pub spec: TargetSpec,
    pub mesh: BoundaryMesh,
    /// Single-layer density on the target boundary.
    pub phi: Vec<Complex64>,
    pub lambda: Complex64,
}

/// Result of a forward solve: per-boundary traces plus an exterior field
/// evaluator. Immutable once constructed.
#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub bodies: Vec<BodySolution>,
    pub target: Option<TargetSolution>,
    pub active: usize,
    pub omega: f64,
    pub source_points: [Vec2; 2],
    pub source_strengths: [Complex64; 2],
    pub linear_residual: f64,
}

impl ForwardSolution {
    /// Free-space potential of the active organ.
    pub fn source_potential(&self, p: Vec2) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 0..2 {
            acc += self.source_strengths[j] * potential::log_kernel(p, self.source_points[j]);
        }
        acc
    }

    pub fn source_potential_grad(&self, p: Vec2) -> [Complex64; 2] {
        let mut gx = Complex64::new(0.0, 0.0);
        let mut gy = Complex64::new(0.0, 0.0);
        for j in 0..2 {
            let g = potential::grad_gamma(p, self.source_points[j]);
            gx += self.source_strengths[j] * g.x;
            gy += self.source_strengths[j] * g.y;
        }
        [gx, gy]
    }

    pub fn is_exterior(&self, p: Vec2) -> bool {
        !self.bodies.iter().any(|b| b.spec.contains(p))
    }

    /// Total potential at an exterior point.
    pub fn eval(&self, p: Vec2) -> Complex64 {
        let mut acc = self.source_potential(p);
        for b in &self.bodies {
            acc += potential::eval_single_layer(&b.mesh, &b.psi, p);
            acc -= potential::eval_double_layer(&b.mesh, &b.psi, p) * b.spec.xi;
        }
        if let Some(t) = &self.target {
            acc += potential::eval_single_layer(&t.mesh, &t.phi, p);
        }
        acc
    }

    /// Gradient of the total potential at an exterior point.
    pub fn eval_grad(&self, p: Vec2) -> [Complex64; 2] {
        let mut g = self.source_potential_grad(p);
        for b in &self.bodies {
            let gs = potential::eval_single_layer_grad(&b.mesh, &b.psi, p);
            let gd = potential::eval_double_layer_grad(&b.mesh, &b.psi, p);
            g[0] += gs[0] - b.spec.xi * gd[0];
            g[1] += gs[1] - b.spec.xi * gd[1];
        }
        if let Some(t) = &self.target {
            let gs = potential::eval_single_layer_grad(&t.mesh, &t.phi, p);
            g[0] += gs[0];
            g[1] += gs[1];
        }
        g
    }

    /// Certification residuals; all are independent of the solved equations
    /// except `linear_residual`, which measures the LU solve itself.
    pub fn residual_report(&self) -> ResidualReport {
        let mut interior_neumann = Vec::new();
        let mut flux = Vec::new();
        let mut aux = Vec::new();
        for (i, b) in self.bodies.iter().enumerate() {
            // d(u_int)/dnu|- = dH_i/dnu + T_i[v_i] must vanish.
            let tv = apply_real_matrix(&b.ops.t, &b.v);
            let mut r: f64 = 0.0;
            for (j, tvj) in tv.iter().enumerate() {
                let mut hn = Complex64::new(0.0, 0.0);
                if i == self.active {
                    for q in 0..2 {
                        hn += self.source_strengths[q]
                            * potential::grad_gamma(b.mesh.points[j], self.source_points[q])
                                .dot(&b.mesh.normals[j]);
                    }
                }
                r = r.max((tvj + hn).norm());
            }
            interior_neumann.push(r);
            let f: Complex64 = b
                .psi
                .iter()
                .zip(&b.mesh.weights)
                .map(|(p, w)| p * *w)
                .sum();
            flux.push(f.norm());
            aux.push(b.aux.norm());
        }

        // Green consistency: H(x) + sum_i D_i[v_i](x) = 0 off the bodies.
        let centroid: Vec2 = self
            .bodies
            .iter()
            .map(|b| b.spec.center)
            .sum::<Vec2>()
            / self.bodies.len() as f64;
        let radius = self
            .bodies
            .iter()
            .flat_map(|b| b.mesh.points.iter())
            .map(|p| (p - centroid).norm())
            .fold(0.0_f64, f64::max)
            * 1.6
            + 1.0;
        let mut green = 0.0_f64;
        for k in 0..8 {
            let th = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
            let p = centroid + Vec2::new(radius * th.cos(), radius * th.sin());
            let mut r = self.source_potential(p);
            for b in &self.bodies {
                r += potential::eval_double_layer(&b.mesh, &b.v, p);
            }
            green = green.max(r.norm());
        }

        // Far-field decay: |u| = O(1/|x|).
        let mut far = 0.0_f64;
        for k in 0..4 {
            let th = std::f64::consts::PI * (0.25 + k as f64 / 2.0);
            let p = centroid + Vec2::new(1e3 * th.cos(), 1e3 * th.sin());
            far = far.max(self.eval(p).norm() * 1e3);
        }

        ResidualReport {
            linear_residual: self.linear_residual,
            interior_neumann,
            green_consistency: green,
            flux,
            aux,
            far_field_bound: far,
        }
    }
}

/// Residuals certifying a forward solve.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// `||Ax - b||_inf / (1 + ||b||_inf)` of the discrete system.
    pub linear_residual: f64,
    /// Per body: inner Neumann residual `||dH/dnu + T[v]||_inf`.
    pub interior_neumann: Vec<f64>,
    /// Off-body residual of the interior Green identity.
    pub green_consistency: f64,
    /// Per body: |integral of psi| (zero net flux through each skin).
    pub flux: Vec<f64>,
    /// Per body: magnitude of the deflation scalar.
    pub aux: Vec<f64>,
    /// `max |u| * |x|` sampled at |x| = 1e3.
    pub far_field_bound: f64,
}

impl ResidualReport {
    pub fn max_residual(&self) -> f64 {
        let mut r = self.linear_residual.max(self.green_consistency);
        for v in self.interior_neumann.iter().chain(&self.flux).chain(&self.aux) {
            r = r.max(*v);
        }
        r
    }
}

struct AssembledScene {
    meshes: Vec<BoundaryMesh>,
    ops: Vec<Arc<SelfOperators>>,
    offsets: Vec<usize>,
    size: usize,
    matrix: DMatrix<f64>,
}

fn assemble_fish_system(scene: &Scene, opts: &ForwardOptions) -> Result<AssembledScene> {
    let nf = scene.fish.len();
    let mut meshes = Vec::with_capacity(nf);
    let mut ops = Vec::with_capacity(nf);
    for f in &scene.fish {
        meshes.push(f.mesh(opts.n_panels_fish)?);
        ops.push(ops_for_shape(f.semiaxis_a, f.semiaxis_b, opts.n_panels_fish)?);
    }
    let n = opts.n_panels_fish;
    let block = 2 * n + 1;
    let size = nf * block;
    let offsets: Vec<usize> = (0..nf).map(|i| i * block).collect();

    let mut a = DMatrix::<f64>::zeros(size, size);
    for k in 0..nf {
        let ok = offsets[k];
        let xi = scene.fish[k].xi;
        let (s, kk) = (&ops[k].s, &ops[k].k);
        // Rows ok..ok+n: exterior Dirichlet trace matching (Robin condition).
        // Rows ok+n..ok+2n: interior Green trace identity.
        // Row ok+2n: zero net flux through the skin.
        for i in 0..n {
            for j in 0..n {
                let e1_psi = xi * (if i == j { 0.5 } else { 0.0 } + kk[(i, j)]) - s[(i, j)];
                a[(ok + i, ok + j)] = e1_psi;
                let e2_v = (if i == j { 0.5 } else { 0.0 }) - kk[(i, j)];
                a[(ok + n + i, ok + n + j)] = e2_v;
            }
            a[(ok + i, ok + n + i)] = 1.0; // v in the Robin row
            a[(ok + n + i, ok + 2 * n)] = 1.0; // deflation scalar
            a[(ok + 2 * n, ok + i)] = meshes[k].weights[i];
        }
        // Cross-body coupling: fields of body i evaluated on body k.
        for i in 0..nf {
            if i == k {
                continue;
            }
            let oi = offsets[i];
            let sl = potential::assemble_single_layer_eval(&meshes[i], &meshes[k].points);
            let dl = potential::assemble_double_layer_eval(&meshes[i], &meshes[k].points);
            let xi_i = scene.fish[i].xi;
            for r in 0..n {
                for c in 0..n {
                    a[(ok + r, oi + c)] = -(sl.matrix[(r, c)] - xi_i * dl.matrix[(r, c)]);
                }
            }
        }
    }
    Ok(AssembledScene {
        meshes,
        ops,
        offsets,
        size,
        matrix: a,
    })
}

fn source_terms(scene: &Scene, active: usize) -> ([Vec2; 2], [Complex64; 2]) {
    let f = &scene.fish[active];
    (f.organ_points(), f.organ.strengths)
}

fn fish_rhs(
    scene: &Scene,
    asm: &AssembledScene,
    active: usize,
    pts: &[Vec2; 2],
    strengths: &[Complex64; 2],
) -> Vec<Complex64> {
    let n = asm.meshes[0].n_panels();
    let mut b = vec![Complex64::new(0.0, 0.0); asm.size];
    for k in 0..scene.fish.len() {
        let ok = asm.offsets[k];
        for i in 0..n {
            let x = asm.meshes[k].points[i];
            let mut h = Complex64::new(0.0, 0.0);
            for q in 0..2 {
                h += strengths[q] * potential::log_kernel(x, pts[q]);
            }
            b[ok + i] = h;
            if k == active {
                b[ok + n + i] = h;
            }
        }
    }
    b
}

fn solve_real_system(
    lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    b: &[Complex64],
) -> Result<Vec<Complex64>> {
    let n = b.len();
    let mut rhs = DMatrix::<f64>::zeros(n, 2);
    for i in 0..n {
        rhs[(i, 0)] = b[i].re;
        rhs[(i, 1)] = b[i].im;
    }
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("fish boundary system is singular".into()))?;
    Ok((0..n).map(|i| Complex64::new(x[(i, 0)], x[(i, 1)])).collect())
}

fn linear_residual(a: &DMatrix<f64>, x: &[Complex64], b: &[Complex64]) -> f64 {
    let ax = apply_real_matrix(a, x);
    let mut r = 0.0_f64;
    let mut scale = 1.0_f64;
    for i in 0..b.len() {
        r = r.max((ax[i] - b[i]).norm());
        scale = scale.max(b[i].norm());
    }
    r / scale
}

/// Solve the transmission problem with fish `active` carrying the source.
///
/// `omega` enters only through the target contrast; the exterior medium is
/// purely conductive by default so the fish-only problem is frequency
/// independent.
pub fn solve_scene(
    scene: &Scene,
    active: usize,
    omega: f64,
    opts: &ForwardOptions,
) -> Result<ForwardSolution> {
    scene.validate()?;
    if active >= scene.fish.len() {
        return Err(Error::InvalidScene(format!(
            "active fish index {active} out of range"
        )));
    }
    if omega < 0.0 {
        return Err(Error::InvalidParameter("omega must be nonnegative".into()));
    }

    let asm = assemble_fish_system(scene, opts)?;
    let (pts, strengths) = source_terms(scene, active);
    let b_f = fish_rhs(scene, &asm, active, &pts, &strengths);
    let lu = asm.matrix.clone().lu();

    let n = opts.n_panels_fish;
    let nf = scene.fish.len();

    let (x_f, target_sol, lin_res) = if let Some(t) = &scene.target {
        let k = contrast(t, &scene.medium, omega);
        let lambda = lambda_from_contrast(k)?;
        let tmesh = t.mesh(opts.n_panels_target)?;
        let tops = ops_for_shape(t.radius, t.radius, opts.n_panels_target)?;
        let nd = opts.n_panels_target;

        // Coupling blocks between the fish system and the target density.
        let mut a_fd = DMatrix::<f64>::zeros(asm.size, nd);
        for kf in 0..nf {
            let ok = asm.offsets[kf];
            let sl = potential::assemble_single_layer_eval(&tmesh, &asm.meshes[kf].points);
            for r in 0..n {
                for c in 0..nd {
                    a_fd[(ok + r, c)] = -sl.matrix[(r, c)];
                }
            }
        }
        let mut a_df = DMatrix::<f64>::zeros(nd, asm.size);
        for i in 0..nf {
            let oi = asm.offsets[i];
            let sn = potential::assemble_single_layer_nderiv_eval(
                &asm.meshes[i],
                &tmesh.points,
                &tmesh.normals,
            );
            let dn = potential::assemble_double_layer_nderiv_eval(
                &asm.meshes[i],
                &tmesh.points,
                &tmesh.normals,
            );
            let xi_i = scene.fish[i].xi;
            for r in 0..nd {
                for c in 0..n {
                    a_df[(r, oi + c)] = -(sn.matrix[(r, c)] - xi_i * dn.matrix[(r, c)]);
                }
            }
        }
        let mut b_d = vec![Complex64::new(0.0, 0.0); nd];
        for (r, bd) in b_d.iter_mut().enumerate() {
            for q in 0..2 {
                *bd += strengths[q]
                    * potential::grad_gamma(tmesh.points[r], pts[q]).dot(&tmesh.normals[r]);
            }
        }

        // Schur complement on the target block: the fish system is real and
        // frequency independent, lambda enters as a scalar shift.
        let x0 = solve_real_system(&lu, &b_f)?;
        let g = lu
            .solve(&a_fd)
            .ok_or_else(|| Error::SingularSystem("fish boundary system is singular".into()))?;
        let w = &a_df * &g;
        let mut schur = DMatrix::<Complex64>::zeros(nd, nd);
        for r in 0..nd {
            for c in 0..nd {
                schur[(r, c)] = Complex64::new(-tops.k_star[(r, c)] - w[(r, c)], 0.0);
            }
            schur[(r, r)] += lambda;
        }
        let mut rhs_d = nalgebra::DVector::<Complex64>::zeros(nd);
        for r in 0..nd {
            let mut acc = b_d[r];
            for c in 0..asm.size {
                acc -= a_df[(r, c)] * x0[c];
            }
            rhs_d[r] = acc;
        }
        let phi = schur
            .lu()
            .solve(&rhs_d)
            .ok_or_else(|| Error::SingularSystem("target block is singular (lambda in spectrum)".into()))?;

        let mut x_f = x0;
        for i in 0..asm.size {
            let mut acc = Complex64::new(0.0, 0.0);
            for c in 0..nd {
                acc += g[(i, c)] * phi[c];
            }
            x_f[i] -= acc;
        }

        // Residual of the coupled system, fish rows only (target rows are
        // solved directly).
        let mut res = 0.0_f64;
        let mut scale = 1.0_f64;
        let ax = apply_real_matrix(&asm.matrix, &x_f);
        for i in 0..asm.size {
            let mut acc = ax[i] - b_f[i];
            for c in 0..nd {
                acc += a_fd[(i, c)] * phi[c];
            }
            res = res.max(acc.norm());
            scale = scale.max(b_f[i].norm());
        }
        let phi_vec: Vec<Complex64> = phi.iter().copied().collect();
        (
            x_f,
            Some(TargetSolution {
                spec: t.clone(),
                mesh: tmesh,
                phi: phi_vec,
                lambda,
            }),
            res / scale,
        )
    } else {
        let x = solve_real_system(&lu, &b_f)?;
        let res = linear_residual(&asm.matrix, &x, &b_f);
        (x, None, res)
    };

    let mut bodies = Vec::with_capacity(nf);
    for kf in 0..nf {
        let ok = asm.offsets[kf];
        bodies.push(BodySolution {
            spec: scene.fish[kf].clone(),
            mesh: asm.meshes[kf].clone(),
            psi: x_f[ok..ok + n].to_vec(),
            v: x_f[ok + n..ok + 2 * n].to_vec(),
            aux: x_f[ok + 2 * n],
            ops: asm.ops[kf].clone(),
        });
    }

    Ok(ForwardSolution {
        bodies,
        target: target_sol,
        active,
        omega,
        source_points: pts,
        source_strengths: strengths,
        linear_residual: lin_res,
    })
}

/// Fish-alone background problem: the active fish in free space, no other
/// bodies and no target.
pub fn solve_background(fish: &FishSpec, opts: &ForwardOptions) -> Result<ForwardSolution> {
    let scene = Scene {
        fish: vec![fish.clone()],
        target: None,
        medium: MediumParams::default(),
    };
    solve_scene(&scene, 0, 0.0, opts)
}

/// Reusable frequency sweep over a fixed geometry: one real factorization,
/// then a small complex solve per frequency.
pub struct FrequencySweep {
    scene: Scene,
    asm_meshes: Vec<BoundaryMesh>,
    asm_ops: Vec<Arc<SelfOperators>>,
    offsets: Vec<usize>,
    n: usize,
    matrix: DMatrix<f64>,
    x0: Vec<Complex64>,
    g: DMatrix<f64>,
    w: DMatrix<f64>,
    tmesh: BoundaryMesh,
    tops: Arc<SelfOperators>,
    a_fd: DMatrix<f64>,
    a_df: DMatrix<f64>,
    b_f: Vec<Complex64>,
    b_d: Vec<Complex64>,
    active: usize,
    pts: [Vec2; 2],
    strengths: [Complex64; 2],
}

impl FrequencySweep {
    pub fn new(scene: &Scene, active: usize, opts: &ForwardOptions) -> Result<FrequencySweep> {
        scene.validate()?;
        let t = scene.target.as_ref().ok_or_else(|| {
            Error::InvalidScene("frequency sweep needs a target in the scene".into())
        })?;
        let asm = assemble_fish_system(scene, opts)?;
        let (pts, strengths) = source_terms(scene, active);
        let b_f = fish_rhs(scene, &asm, active, &pts, &strengths);
        let lu = asm.matrix.clone().lu();
        let tmesh = t.mesh(opts.n_panels_target)?;
        let tops = ops_for_shape(t.radius, t.radius, opts.n_panels_target)?;
        let nd = opts.n_panels_target;
        let n = opts.n_panels_fish;
        let nf = scene.fish.len();

        let mut a_fd = DMatrix::<f64>::zeros(asm.size, nd);
        for kf in 0..nf {
            let ok = asm.offsets[kf];
            let sl = potential::assemble_single_layer_eval(&tmesh, &asm.meshes[kf].points);
            for r in 0..n {
                for c in 0..nd {
                    a_fd[(ok + r, c)] = -sl.matrix[(r, c)];
                }
            }
        }
        let mut a_df = DMatrix::<f64>::zeros(nd, asm.size);
        for i in 0..nf {
            let oi = asm.offsets[i];
            let sn = potential::assemble_single_layer_nderiv_eval(
                &asm.meshes[i],
                &tmesh.points,
                &tmesh.normals,
            );
            let dn = potential::assemble_double_layer_nderiv_eval(
                &asm.meshes[i],
                &tmesh.points,
                &tmesh.normals,
            );
            let xi_i = scene.fish[i].xi;
            for r in 0..nd {
                for c in 0..n {
                    a_df[(r, oi + c)] = -(sn.matrix[(r, c)] - xi_i * dn.matrix[(r, c)]);
                }
            }
        }
        let mut b_d = vec![Complex64::new(0.0, 0.0); nd];
        for (r, bd) in b_d.iter_mut().enumerate() {
            for q in 0..2 {
                *bd += strengths[q]
                    * potential::grad_gamma(tmesh.points[r], pts[q]).dot(&tmesh.normals[r]);
            }
        }

        let x0 = solve_real_system(&lu, &b_f)?;
        let g = lu
            .solve(&a_fd)
            .ok_or_else(|| Error::SingularSystem("fish boundary system is singular".into()))?;
        let w = &a_df * &g;

        Ok(FrequencySweep {
            scene: scene.clone(),
            asm_meshes: asm.meshes,
            asm_ops: asm.ops,
            offsets: asm.offsets,
            n,
            matrix: asm.matrix,
            x0,
            g,
            w,
            tmesh,
            tops,
            a_fd,
            a_df,
            b_f,
            b_d,
            active,
            pts,
            strengths,
        })
    }

    pub fn solve_at(&self, omega: f64) -> Result<ForwardSolution> {
        let t = self.scene.target.as_ref().unwrap();
        let k = contrast(t, &self.scene.medium, omega);
        let lambda = lambda_from_contrast(k)?;
        let nd = self.tmesh.n_panels();

        let mut schur = DMatrix::<Complex64>::zeros(nd, nd);
        for r in 0..nd {
            for c in 0..nd {
                schur[(r, c)] = Complex64::new(-self.tops.k_star[(r, c)] - self.w[(r, c)], 0.0);
            }
            schur[(r, r)] += lambda;
        }
        let mut rhs_d = nalgebra::DVector::<Complex64>::zeros(nd);
        for r in 0..nd {
            let mut acc = self.b_d[r];
            for c in 0..self.x0.len() {
                acc -= self.a_df[(r, c)] * self.x0[c];
            }
            rhs_d[r] = acc;
        }
        let phi = schur.lu().solve(&rhs_d).ok_or_else(|| {
            Error::SingularSystem("target block is singular (lambda in spectrum)".into())
        })?;

        let size = self.x0.len();
        let mut x_f = self.x0.clone();
        for i in 0..size {
            let mut acc = Complex64::new(0.0, 0.0);
            for c in 0..nd {
                acc += self.g[(i, c)] * phi[c];
            }
            x_f[i] -= acc;
        }

        let mut res = 0.0_f64;
        let mut scale = 1.0_f64;
        let ax = apply_real_matrix(&self.matrix, &x_f);
        for i in 0..size {
            let mut acc = ax[i] - self.b_f[i];
            for c in 0..nd {
                acc += self.a_fd[(i, c)] * phi[c];
            }
            res = res.max(acc.norm());
            scale = scale.max(self.b_f[i].norm());
        }

        let n = self.n;
        let mut bodies = Vec::new();
        for kf in 0..self.scene.fish.len() {
            let ok = self.offsets[kf];
            bodies.push(BodySolution {
                spec: self.scene.fish[kf].clone(),
                mesh: self.asm_meshes[kf].clone(),
                psi: x_f[ok..ok + n].to_vec(),
                v: x_f[ok + n..ok + 2 * n].to_vec(),
                aux: x_f[ok + 2 * n],
                ops: self.asm_ops[kf].clone(),
            });
        }
        Ok(ForwardSolution {
            bodies,
            target: Some(TargetSolution {
                spec: t.clone(),
                mesh: self.tmesh.clone(),
                phi: phi.iter().copied().collect(),
                lambda,
            }),
            active: self.active,
            omega,
            source_points: self.pts,
            source_strengths: self.strengths,
            linear_residual: res / scale,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{heading_from_angle, rotate, EodSignal};

    fn wave() -> EodSignal {
        EodSignal::Wave { omega: 1.0 }
    }

    fn two_fish_scene() -> Scene {
        Scene {
            fish: vec![
                FishSpec::standard(Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), 0.3, wave()).unwrap(),
                FishSpec::standard(Vec2::new(6.0, 4.0), Vec2::new(0.0, 1.0), 0.3, wave()).unwrap(),
            ],
            target: None,
            medium: MediumParams::default(),
        }
    }

    fn opts(n: usize) -> ForwardOptions {
        ForwardOptions { n_panels_fish: n, n_panels_target: 64 }
    }

    #[test]
    fn residuals_certify_two_fish_solve() {
        let scene = two_fish_scene();
        let sol = solve_scene(&scene, 1, 0.0, &opts(256)).unwrap();
        let rep = sol.residual_report();
        assert!(rep.linear_residual < 1e-10, "linear residual {}", rep.linear_residual);
        for r in &rep.interior_neumann {
            assert!(*r < 1e-6, "interior Neumann residual {r}");
        }
        assert!(rep.green_consistency < 1e-6, "green {}", rep.green_consistency);
        for f in &rep.flux {
            assert!(*f < 1e-10, "flux {f}");
        }
        assert!(rep.far_field_bound < 10.0, "far field bound {}", rep.far_field_bound);
    }

    #[test]
    fn single_fish_matches_background_path() {
        let f = FishSpec::standard(Vec2::new(0.5, -0.25), heading_from_angle(0.4), 0.3, wave()).unwrap();
        let scene = Scene { fish: vec![f.clone()], target: None, medium: MediumParams::default() };
        let a = solve_scene(&scene, 0, 0.0, &opts(128)).unwrap();
        let b = solve_background(&f, &opts(128)).unwrap();
        for (x, y) in a.bodies[0].psi.iter().zip(&b.bodies[0].psi) {
            assert!((x - y).norm() < 1e-10);
        }
        for (x, y) in a.bodies[0].v.iter().zip(&b.bodies[0].v) {
            assert!((x - y).norm() < 1e-10);
        }
    }

    #[test]
    fn solution_scales_linearly_with_source() {
        let mut scene = two_fish_scene();
        let base = solve_scene(&scene, 0, 0.0, &opts(64)).unwrap();
        let c = Complex64::new(2.0, 1.0);
        scene.fish[0].organ = scene.fish[0].organ.scaled(c);
        let scaled = solve_scene(&scene, 0, 0.0, &opts(64)).unwrap();
        for (x, y) in base.bodies[1].psi.iter().zip(&scaled.bodies[1].psi) {
            assert!((x * c - y).norm() < 1e-10 * (1.0 + y.norm()));
        }
        let p = Vec2::new(3.0, 1.0);
        assert!((base.eval(p) * c - scaled.eval(p)).norm() < 1e-12);
    }

    #[test]
    fn background_far_field_decays() {
        let f = FishSpec::standard(Vec2::zeros(), Vec2::new(1.0, 0.0), 0.3, wave()).unwrap();
        let sol = solve_background(&f, &opts(128)).unwrap();
        for k in 0..6 {
            let th = 2.0 * std::f64::consts::PI * k as f64 / 6.0;
            let p = Vec2::new(1e3 * th.cos(), 1e3 * th.sin());
            assert!(sol.eval(p).norm() * 1e3 < 10.0);
        }
    }

    #[test]
    fn background_reflection_symmetry() {
        // Fish symmetric about the x axis with an axial organ.
        let f = FishSpec::standard(Vec2::zeros(), Vec2::new(1.0, 0.0), 0.3, wave()).unwrap();
        let sol = solve_background(&f, &opts(256)).unwrap();
        for p in [Vec2::new(3.0, 1.2), Vec2::new(-2.5, 0.7), Vec2::new(0.3, 2.2)] {
            let q = Vec2::new(p.x, -p.y);
            assert!((sol.eval(p) - sol.eval(q)).norm() < 1e-8);
        }
    }

    #[test]
    fn background_gradient_matches_finite_differences() {
        let f = FishSpec::standard(Vec2::zeros(), Vec2::new(1.0, 0.0), 0.3, wave()).unwrap();
        let sol = solve_background(&f, &opts(128)).unwrap();
        let z = Vec2::new(3.5, 1.0);
        let g = sol.eval_grad(z);
        let h = 1e-4;
        let gx = (sol.eval(z + Vec2::new(h, 0.0)) - sol.eval(z - Vec2::new(h, 0.0))) / (2.0 * h);
        let gy = (sol.eval(z + Vec2::new(0.0, h)) - sol.eval(z - Vec2::new(0.0, h))) / (2.0 * h);
        assert!((g[0] - gx).norm() < 1e-6);
        assert!((g[1] - gy).norm() < 1e-6);
    }

    #[test]
    fn skin_data_self_convergence() {
        // Nodes are nested under panel doubling, so skin data can be
        // compared pointwise.
        let scene = two_fish_scene();
        let a = solve_scene(&scene, 1, 0.0, &opts(64)).unwrap();
        let b = solve_scene(&scene, 1, 0.0, &opts(128)).unwrap();
        let mut d = 0.0_f64;
        for j in 0..64 {
            let ua = a.bodies[0].u_plus()[j];
            let ub = b.bodies[0].u_plus()[2 * j];
            d = d.max((ua - ub).norm());
        }
        assert!(d < 1e-5, "coarse-fine skin difference {d}");
    }

    #[test]
    fn rigid_motion_equivariance_of_solve() {
        let scene = two_fish_scene();
        let sol = solve_scene(&scene, 1, 0.0, &opts(64)).unwrap();
        let th = 0.6;
        let shift = Vec2::new(-1.0, 2.0);
        let moved = Scene {
            fish: scene
                .fish
                .iter()
                .map(|f| {
                    f.posed(rotate(f.center, th) + shift, rotate(f.heading, th))
                })
                .collect(),
            target: None,
            medium: MediumParams::default(),
        };
        let sol2 = solve_scene(&moved, 1, 0.0, &opts(64)).unwrap();
        for j in 0..64 {
            assert!((sol.bodies[0].psi[j] - sol2.bodies[0].psi[j]).norm() < 1e-9);
            assert!((sol.bodies[0].v[j] - sol2.bodies[0].v[j]).norm() < 1e-9);
        }
    }

    fn target_scene(delta: f64, eps: f64) -> Scene {
        let mut s = two_fish_scene();
        s.target = Some(TargetSpec::new(Vec2::new(3.0, 2.0), delta, 2.0, eps).unwrap());
        s
    }

    #[test]
    fn no_contrast_target_is_invisible() {
        let mut scene = target_scene(0.2, 0.0);
        scene.target = Some(TargetSpec::new(Vec2::new(3.0, 2.0), 0.2, 1.0, 0.0).unwrap());
        // sigma_D = sigma_w and eps_D = eps_w gives k = 1: degenerate.
        assert!(solve_scene(&scene, 0, 0.0, &opts(64)).is_err());
    }

    #[test]
    fn real_contrast_keeps_solution_real() {
        let scene = target_scene(0.2, 0.0);
        let sol = solve_scene(&scene, 0, 0.7, &opts(64)).unwrap();
        for b in &sol.bodies {
            for p in &b.psi {
                assert!(p.im.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn target_perturbation_scales_quadratically_in_radius() {
        let base = solve_scene(&two_fish_scene(), 0, 1.0, &opts(64)).unwrap();
        let norm_delta = |delta: f64| {
            let scene = target_scene(delta, 1.0);
            let sol = solve_scene(&scene, 0, 1.0, &opts(64)).unwrap();
            let mut acc = 0.0_f64;
            for j in 0..64 {
                acc += (sol.bodies[0].psi[j] - base.bodies[0].psi[j]).norm_sqr();
            }
            acc.sqrt()
        };
        let d1 = norm_delta(0.2);
        let d2 = norm_delta(0.1);
        let ratio = d2 / d1;
        assert!((ratio - 0.25).abs() < 0.25 * 0.15, "quadratic ratio {ratio}");
    }

    #[test]
    fn overlapping_bodies_rejected() {
        let scene = Scene {
            fish: vec![
                FishSpec::standard(Vec2::zeros(), Vec2::new(1.0, 0.0), 0.3, wave()).unwrap(),
                FishSpec::standard(Vec2::new(1.0, 0.0), Vec2::new(1.0, 0.0), 0.3, wave()).unwrap(),
            ],
            target: None,
            medium: MediumParams::default(),
        };
        assert!(scene.validate().is_err());
    }

    #[test]
    fn frequency_sweep_matches_direct_solve() {
        let scene = target_scene(0.2, 1.0);
        let sweep = FrequencySweep::new(&scene, 0, &opts(64)).unwrap();
        for omega in [0.3, 1.0, 4.0] {
            let a = sweep.solve_at(omega).unwrap();
            let b = solve_scene(&scene, 0, omega, &opts(64)).unwrap();
            for j in 0..64 {
                assert!((a.bodies[0].psi[j] - b.bodies[0].psi[j]).norm() < 1e-10);
            }
        }
    }
}
