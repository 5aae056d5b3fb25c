//! Fish bodies, targets, receptor arrays and search grids.
//!
//! Bodies are ellipses parametrized by angle; panels are equi-spaced in the
//! parameter (not arclength) so that the periodic trapezoidal rule applies
//! with the exact Jacobian `|x'(t)|`. Receptors are placed equi-spaced in
//! arclength by inverting the cumulative arclength and snapping to the
//! nearest quadrature node, so skin data can be read off without
//! interpolation.

use nalgebra::Vector2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;

/// Rotate a vector by `theta` radians (counterclockwise).
pub fn rotate(v: Vec2, theta: f64) -> Vec2 {
    let (s, c) = theta.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Unit heading vector from an angle in radians.
pub fn heading_from_angle(phi: f64) -> Vec2 {
    Vec2::new(phi.cos(), phi.sin())
}

/// Signed angle from `a` to `b` in (-pi, pi].
pub fn signed_angle(a: Vec2, b: Vec2) -> f64 {
    (a.x * b.y - a.y * b.x).atan2(a.dot(&b))
}

/// A discretized closed C^2 curve: quadrature nodes, outward normals and
/// arc-length weights of the periodic trapezoidal rule, plus the metric
/// data (speed, curvature) needed by the singular quadratures.
#[derive(Debug, Clone)]
pub struct BoundaryMesh {
    /// Panel midpoints `x(t_j)`, `t_j = 2*pi*j/N`, ordered counterclockwise.
    pub points: Vec<Vec2>,
    /// Outward unit normals at the nodes.
    pub normals: Vec<Vec2>,
    /// Unit tangents (counterclockwise orientation).
    pub tangents: Vec<Vec2>,
    /// Arc-length quadrature weights `|x'(t_j)| * 2*pi/N`.
    pub weights: Vec<f64>,
    /// Parametric speed `|x'(t_j)|`.
    pub speed: Vec<f64>,
    /// Signed curvature at the nodes.
    pub curvature: Vec<f64>,
    pub closed: bool,
}

impl BoundaryMesh {
    pub fn n_panels(&self) -> usize {
        self.points.len()
    }

    /// Parameter of node `j` in `[0, 2*pi)`.
    pub fn param(&self, j: usize) -> f64 {
        2.0 * std::f64::consts::PI * j as f64 / self.n_panels() as f64
    }

    pub fn perimeter(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Arclength coordinate of node `j` measured from node 0.
    pub fn arclength(&self, j: usize) -> f64 {
        self.weights[..j].iter().sum()
    }

    /// Apply a rigid motion: rotate by `theta` about the origin, then
    /// translate by `shift`.
    pub fn transformed(&self, theta: f64, shift: Vec2) -> BoundaryMesh {
        BoundaryMesh {
            points: self.points.iter().map(|p| rotate(*p, theta) + shift).collect(),
            normals: self.normals.iter().map(|n| rotate(*n, theta)).collect(),
            tangents: self.tangents.iter().map(|t| rotate(*t, theta)).collect(),
            weights: self.weights.clone(),
            speed: self.speed.clone(),
            curvature: self.curvature.clone(),
            closed: self.closed,
        }
    }
}

/// Discretize the ellipse with semiaxes `a`, `b`, centered at `center`, with
/// the `a`-axis along `heading`, into `n_panels` panels.
pub fn make_ellipse_mesh(
    a: f64,
    b: f64,
    center: Vec2,
    heading: Vec2,
    n_panels: usize,
) -> Result<BoundaryMesh> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "ellipse semiaxes must be positive, got a={a}, b={b}"
        )));
    }
    if n_panels < 16 || n_panels % 2 != 0 {
        return Err(Error::InvalidGeometry(format!(
            "n_panels must be even and >= 16, got {n_panels}"
        )));
    }
    let h = heading.norm();
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidGeometry("zero heading vector".into()));
    }
    let phi = heading.y.atan2(heading.x);

    let n = n_panels;
    let dt = 2.0 * std::f64::consts::PI / n as f64;
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut tangents = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut speed = Vec::with_capacity(n);
    let mut curvature = Vec::with_capacity(n);

    for j in 0..n {
        let t = dt * j as f64;
        let (st, ct) = t.sin_cos();
        let body = Vec2::new(a * ct, b * st);
        let dbody = Vec2::new(-a * st, b * ct);
        let sp = dbody.norm();
        let tangent = dbody / sp;
        points.push(center + rotate(body, phi));
        tangents.push(rotate(tangent, phi));
        // Counterclockwise curve: outward normal is the tangent rotated by -90 deg.
        normals.push(rotate(Vec2::new(tangent.y, -tangent.x), phi));
        weights.push(sp * dt);
        speed.push(sp);
        curvature.push(a * b / sp.powi(3));
    }

    Ok(BoundaryMesh {
        points,
        normals,
        tangents,
        weights,
        speed,
        curvature,
        closed: true,
    })
}

/// Band-limited interpolation of periodic nodal data at parameter `t`,
/// using the periodic sinc kernel on `N` equispaced nodes (`N` even). Exact
/// for trigonometric polynomials of degree below `N/2`, so in particular
/// exact for ellipse coordinates and spectrally accurate for smooth traces.
pub fn interp_periodic(values: &[f64], t: f64) -> f64 {
    let n = values.len();
    let dt = 2.0 * std::f64::consts::PI / n as f64;
    let mut acc = 0.0;
    for (j, v) in values.iter().enumerate() {
        let th = t - dt * j as f64;
        let half = 0.5 * th;
        let s = half.sin();
        let w = if s.abs() < 1e-14 {
            1.0
        } else {
            (n as f64 * half).sin() / (n as f64 * half.tan())
        };
        acc += v * w;
    }
    acc
}

/// Complex variant of [`interp_periodic`].
pub fn interp_periodic_complex(values: &[Complex64], t: f64) -> Complex64 {
    let n = values.len();
    let dt = 2.0 * std::f64::consts::PI / n as f64;
    let mut acc = Complex64::new(0.0, 0.0);
    for (j, v) in values.iter().enumerate() {
        let th = t - dt * j as f64;
        let half = 0.5 * th;
        let s = half.sin();
        let w = if s.abs() < 1e-14 {
            1.0
        } else {
            (n as f64 * half).sin() / (n as f64 * half.tan())
        };
        acc += v * w;
    }
    acc
}

/// Parameters of `n` equi-arclength receptor sites, found by inverting the
/// cumulative arclength of the mesh.
pub fn receptor_params(mesh: &BoundaryMesh, n: usize) -> Result<Vec<f64>> {
    let np = mesh.n_panels();
    if n == 0 || n > np {
        return Err(Error::InvalidGeometry(format!(
            "receptor count {n} must be in 1..={np}"
        )));
    }
    let total = mesh.perimeter();
    let dt = 2.0 * std::f64::consts::PI / np as f64;
    // Arclength at node j, accumulated panel by panel.
    let mut node_arc = Vec::with_capacity(np + 1);
    let mut acc = 0.0;
    for j in 0..np {
        node_arc.push(acc);
        acc += mesh.weights[j];
    }
    node_arc.push(total);
    let mut out = Vec::with_capacity(n);
    let mut j = 0usize;
    for k in 0..n {
        let target = total * k as f64 / n as f64;
        while j + 1 < np && node_arc[j + 1] <= target {
            j += 1;
        }
        // Local inversion within panel j at its parametric speed.
        let t = dt * j as f64 + (target - node_arc[j]) / mesh.speed[j];
        out.push(t);
    }
    Ok(out)
}

/// Place `n` receptors equi-spaced in arclength on the mesh. Positions and
/// outward normals are recovered by band-limited interpolation of the nodal
/// coordinates, which is exact for elliptical boundaries.
pub fn place_receptors(mesh: &BoundaryMesh, n: usize) -> Result<Vec<(Vec2, Vec2)>> {
    let params = receptor_params(mesh, n)?;
    let xs: Vec<f64> = mesh.points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = mesh.points.iter().map(|p| p.y).collect();
    let txs: Vec<f64> = mesh
        .tangents
        .iter()
        .zip(&mesh.speed)
        .map(|(t, s)| t.x * s)
        .collect();
    let tys: Vec<f64> = mesh
        .tangents
        .iter()
        .zip(&mesh.speed)
        .map(|(t, s)| t.y * s)
        .collect();
    let mut out = Vec::with_capacity(n);
    for t in params {
        let p = Vec2::new(interp_periodic(&xs, t), interp_periodic(&ys, t));
        let tangent = Vec2::new(interp_periodic(&txs, t), interp_periodic(&tys, t));
        let tangent = tangent / tangent.norm();
        out.push((p, Vec2::new(tangent.y, -tangent.x)));
    }
    Ok(out)
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Rect> {
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::InvalidGeometry(format!(
                "empty bounding box [{x0},{x1}]x[{y0},{y1}]"
            )));
        }
        Ok(Rect { x0, x1, y0, y1 })
    }

    pub fn centered(center: Vec2, half_width: f64) -> Result<Rect> {
        Rect::new(
            center.x - half_width,
            center.x + half_width,
            center.y - half_width,
            center.y + half_width,
        )
    }
}

/// Uniform rectangular lattice of candidate source locations.
#[derive(Debug, Clone)]
pub struct SearchGrid {
    pub points: Vec<Vec2>,
    /// True for lattice points inside a fish body; such points are skipped
    /// by localizer scans.
    pub excluded: Vec<bool>,
    pub nx: usize,
    pub ny: usize,
    pub resolution: f64,
}

impl SearchGrid {
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }
}

/// Build a uniform grid covering `bbox` with spacing `resolution`, excluding
/// points inside any of the given fish bodies.
pub fn make_search_grid(bbox: Rect, resolution: f64, bodies: &[&FishSpec]) -> Result<SearchGrid> {
    if !(resolution > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "grid resolution must be positive, got {resolution}"
        )));
    }
    let nx = ((bbox.x1 - bbox.x0) / resolution).round() as usize + 1;
    let ny = ((bbox.y1 - bbox.y0) / resolution).round() as usize + 1;
    let mut points = Vec::with_capacity(nx * ny);
    let mut excluded = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let p = Vec2::new(
                bbox.x0 + resolution * ix as f64,
                bbox.y0 + resolution * iy as f64,
            );
            points.push(p);
            excluded.push(bodies.iter().any(|f| f.contains(p)));
        }
    }
    Ok(SearchGrid {
        points,
        excluded,
        nx,
        ny,
        resolution,
    })
}

/// The two-pole electric organ carried by a fish, stored in the body frame
/// (offsets from the body center, with the heading along +x).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElectricOrgan {
    pub offsets: [Vec2; 2],
    pub strengths: [Complex64; 2],
}

impl ElectricOrgan {
    /// Two poles at `±offset*a` along the heading with strengths `±1`.
    pub fn axial(a: f64) -> ElectricOrgan {
        ElectricOrgan {
            offsets: [Vec2::new(0.35 * a, 0.0), Vec2::new(-0.35 * a, 0.0)],
            strengths: [Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
        }
    }

    /// Charge neutrality must hold exactly.
    pub fn new(offsets: [Vec2; 2], strengths: [Complex64; 2]) -> Result<ElectricOrgan> {
        if strengths[0] + strengths[1] != Complex64::new(0.0, 0.0) {
            return Err(Error::InvalidScene(format!(
                "organ strengths must sum to zero exactly, got {} + {}",
                strengths[0], strengths[1]
            )));
        }
        Ok(ElectricOrgan { offsets, strengths })
    }

    pub fn scaled(&self, c: Complex64) -> ElectricOrgan {
        ElectricOrgan {
            offsets: self.offsets,
            strengths: [self.strengths[0] * c, self.strengths[1] * c],
        }
    }
}

/// EOD signal type: sinusoidal wave at angular frequency `omega`, or a
/// scaled/shifted copy `h(eta*t - shift)` of the standard pulse shape.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EodSignal {
    Wave { omega: f64 },
    Pulse { eta: f64, shift: f64 },
}

impl EodSignal {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EodSignal::Wave { omega } => {
                if !(omega > 0.0) {
                    return Err(Error::InvalidScene(format!(
                        "wave EOD needs omega > 0, got {omega}"
                    )));
                }
            }
            EodSignal::Pulse { eta, .. } => {
                if !(eta > 0.0) {
                    return Err(Error::InvalidScene(format!(
                        "pulse EOD needs eta > 0, got {eta}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Time support of the pulse `h(eta*t - shift)`; `None` for wave signals.
    pub fn pulse_support(&self) -> Option<(f64, f64)> {
        match *self {
            EodSignal::Wave { .. } => None,
            EodSignal::Pulse { eta, shift } => Some(((shift - 1.0) / eta, (shift + 1.0) / eta)),
        }
    }

    pub fn eval(&self, t: f64) -> Complex64 {
        match *self {
            EodSignal::Wave { omega } => Complex64::new(0.0, omega * t).exp(),
            EodSignal::Pulse { eta, shift } => Complex64::new(pulse_shape(eta * t - shift), 0.0),
        }
    }
}

/// Standard compactly supported pulse shape: `(1 - s^2)^2` on `[-1, 1]`.
pub fn pulse_shape(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        let q = 1.0 - s * s;
        q * q
    }
}

/// An elliptical fish body with a resistive skin, an electric organ and an
/// array of skin receptors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FishSpec {
    pub semiaxis_a: f64,
    pub semiaxis_b: f64,
    pub center: Vec2,
    /// Unit vector along the major axis.
    pub heading: Vec2,
    /// Effective skin thickness parameter of the Robin condition.
    pub xi: f64,
    pub organ: ElectricOrgan,
    pub eod: EodSignal,
    pub n_receptors: usize,
}

impl FishSpec {
    pub fn new(
        a: f64,
        b: f64,
        center: Vec2,
        heading: Vec2,
        xi: f64,
        organ: ElectricOrgan,
        eod: EodSignal,
        n_receptors: usize,
    ) -> Result<FishSpec> {
        if !(a > b && b > 0.0) {
            return Err(Error::InvalidScene(format!(
                "fish semiaxes must satisfy a > b > 0, got a={a}, b={b}"
            )));
        }
        if !(xi > 0.0) {
            return Err(Error::InvalidScene(format!("skin parameter xi must be positive, got {xi}")));
        }
        if n_receptors == 0 {
            return Err(Error::InvalidScene("fish needs at least one receptor".into()));
        }
        let n = heading.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidScene("fish heading must be a nonzero vector".into()));
        }
        eod.validate()?;
        for off in &organ.offsets {
            let q = (off.x / a).powi(2) + (off.y / b).powi(2);
            if q >= 1.0 {
                return Err(Error::InvalidScene(format!(
                    "organ pole at body-frame offset ({}, {}) lies outside the ellipse",
                    off.x, off.y
                )));
            }
        }
        Ok(FishSpec {
            semiaxis_a: a,
            semiaxis_b: b,
            center,
            heading: heading / n,
            xi,
            organ,
            eod,
            n_receptors,
        })
    }

    /// Standard fish of the experiments: semiaxes 2 x 0.3, axial two-pole
    /// organ, 32 receptors.
    pub fn standard(center: Vec2, heading: Vec2, xi: f64, eod: EodSignal) -> Result<FishSpec> {
        let a = 2.0;
        FishSpec::new(a, 0.3, center, heading, xi, ElectricOrgan::axial(a), eod, 32)
    }

    pub fn heading_angle(&self) -> f64 {
        self.heading.y.atan2(self.heading.x)
    }

    /// Point-in-ellipse test via the quadratic form in the body frame.
    pub fn contains(&self, p: Vec2) -> bool {
        let d = rotate(p - self.center, -self.heading_angle());
        (d.x / self.semiaxis_a).powi(2) + (d.y / self.semiaxis_b).powi(2) < 1.0
    }

    pub fn mesh(&self, n_panels: usize) -> Result<BoundaryMesh> {
        make_ellipse_mesh(
            self.semiaxis_a,
            self.semiaxis_b,
            self.center,
            self.heading,
            n_panels,
        )
    }

    /// World-frame organ pole positions.
    pub fn organ_points(&self) -> [Vec2; 2] {
        let phi = self.heading_angle();
        [
            self.center + rotate(self.organ.offsets[0], phi),
            self.center + rotate(self.organ.offsets[1], phi),
        ]
    }

    /// Same fish moved to a new pose.
    pub fn posed(&self, center: Vec2, heading: Vec2) -> FishSpec {
        let mut f = self.clone();
        f.center = center;
        f.heading = heading / heading.norm();
        f
    }

    pub fn receptors(&self, mesh: &BoundaryMesh) -> Result<Vec<(Vec2, Vec2)>> {
        place_receptors(mesh, self.n_receptors)
    }

    /// Smallest distance from point `p` to the body boundary, approximated
    /// over the mesh nodes.
    pub fn boundary_distance(&self, p: Vec2, mesh: &BoundaryMesh) -> f64 {
        mesh.points
            .iter()
            .map(|q| (p - q).norm())
            .fold(f64::INFINITY, f64::min)
    }
}

/// A small disk-shaped dielectric target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetSpec {
    pub center: Vec2,
    pub radius: f64,
    pub sigma: f64,
    pub eps: f64,
}

impl TargetSpec {
    pub fn new(center: Vec2, radius: f64, sigma: f64, eps: f64) -> Result<TargetSpec> {
        if !(radius > 0.0) {
            return Err(Error::InvalidScene(format!(
                "target radius must be positive, got {radius}"
            )));
        }
        if !(sigma >= 0.0 && eps >= 0.0) {
            return Err(Error::InvalidScene(
                "target material parameters must be nonnegative".into(),
            ));
        }
        Ok(TargetSpec {
            center,
            radius,
            sigma,
            eps,
        })
    }

    /// Mesh of the target boundary (disk of radius `radius` at `center`).
    pub fn mesh(&self, n_panels: usize) -> Result<BoundaryMesh> {
        // A disk has no preferred axis; reuse the ellipse mesh with a = b.
        make_ellipse_mesh(
            self.radius,
            self.radius,
            self.center,
            Vec2::new(1.0, 0.0),
            n_panels,
        )
    }
}

/// Background medium (water) parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MediumParams {
    pub sigma: f64,
    pub eps: f64,
}

impl Default for MediumParams {
    fn default() -> Self {
        // Water is purely conductive at EOD frequencies.
        MediumParams { sigma: 1.0, eps: 0.0 }
    }
}

impl MediumParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidScene(format!(
                "medium conductivity must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidScene(format!(
                "medium permittivity must be nonnegative, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}
