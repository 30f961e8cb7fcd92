//! Disintegration of grid densities along the leaves of two potentials whose
//! leaf structure is known in closed form, reassembly of the resulting
//! mixture, and curvature-dimension checks on one-dimensional needles.
//!
//! * Projection `u(x) = (x₁, …, x_m)`: the leaves are the affine slices on
//!   which the trailing coordinates are fixed, and the conditional densities
//!   are the normalised restrictions of the grid density.
//! * Radial `u(x) = ‖x − c‖`: the leaves are rays from `c`, and the
//!   conditional density along a ray is `∝ r^{n−1} f(c + rθ)`.
//!
//! Grids store values at cell centres with the first axis varying fastest.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::par::{self, Exec};

/// Axis-aligned box split into `resolution[a]` equal cells along axis `a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub resolution: Vec<usize>,
}

impl GridGeometry {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, resolution: Vec<usize>) -> Result<Self> {
        let g = GridGeometry { lower, upper, resolution };
        g.validate()?;
        Ok(g)
    }

    /// The cube `[−half_width, half_width]^n` with `resolution` cells per axis.
    pub fn cube(n: usize, half_width: f64, resolution: usize) -> Result<Self> {
        Self::new(vec![-half_width; n], vec![half_width; n], vec![resolution; n])
    }

    fn validate(&self) -> Result<()> {
        let n = self.lower.len();
        if n == 0 {
            return Err(Error::Empty);
        }
        if self.upper.len() != n || self.resolution.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "grid bounds have {} and {} entries, resolution {}",
                n,
                self.upper.len(),
                self.resolution.len()
            )));
        }
        if self.lower.iter().chain(&self.upper).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("grid bounds"));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidParameter("grid bounds must satisfy lower < upper".into()));
        }
        if self.resolution.contains(&0) {
            return Err(Error::InvalidParameter("grid resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.resolution[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    /// Centre coordinate of cell `index` along `axis`.
    pub fn coordinate(&self, axis: usize, index: usize) -> f64 {
        self.lower[axis] + (index as f64 + 0.5) * self.spacing(axis)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        self.resolution
            .iter()
            .map(|&r| {
                let i = flat % r;
                flat /= r;
                i
            })
            .collect()
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        index.iter().zip(&self.resolution).rev().fold(0, |acc, (&i, &r)| acc * r + i)
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat).into_iter().enumerate().map(|(a, i)| self.coordinate(a, i)).collect()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && point.iter().zip(self.lower.iter().zip(&self.upper)).all(|(x, (l, u))| l <= x && x <= u)
    }
}

/// Nonnegative density sampled at the cell centres of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid")]
pub struct GridDensity {
    geometry: GridGeometry,
    samples: Vec<f64>,
}

#[derive(Deserialize)]
struct RawGrid {
    geometry: GridGeometry,
    samples: Vec<f64>,
}

impl TryFrom<RawGrid> for GridDensity {
    type Error = Error;
    fn try_from(raw: RawGrid) -> Result<Self> {
        GridDensity::new(raw.geometry, raw.samples)
    }
}

impl GridDensity {
    /// Errors on non-finite or negative samples and on zero total mass.
    pub fn new(geometry: GridGeometry, samples: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if samples.len() != geometry.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a grid of {} cells",
                samples.len(),
                geometry.len()
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("density samples"));
        }
        if samples.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidParameter("density samples must be nonnegative".into()));
        }
        if !samples.iter().any(|&s| s > 0.0) {
            return Err(Error::InvalidParameter("density has zero total mass".into()));
        }
        Ok(GridDensity { geometry, samples })
    }

    /// Samples `f` at every cell centre.
    pub fn from_fn<F: Fn(&[f64]) -> f64>(geometry: GridGeometry, f: F) -> Result<Self> {
        geometry.validate()?;
        let samples = (0..geometry.len()).map(|k| f(&geometry.center(k))).collect();
        Self::new(geometry, samples)
    }

    /// Standard Gaussian `e^{−‖x‖²/2}` on `[−half_width, half_width]^n`.
    pub fn gaussian(n: usize, half_width: f64, resolution: usize) -> Result<Self> {
        Self::from_fn(GridGeometry::cube(n, half_width, resolution)?, |x| (-0.5 * dot(x, x)).exp())
    }

    /// Constant density on `[−half_width, half_width]^n`.
    pub fn uniform(n: usize, half_width: f64, resolution: usize) -> Result<Self> {
        Self::from_fn(GridGeometry::cube(n, half_width, resolution)?, |_| 1.0)
    }

    /// Indicator of the centred ball of `radius` on `[−half_width, half_width]^n`.
    pub fn ball(n: usize, radius: f64, half_width: f64, resolution: usize) -> Result<Self> {
        Self::from_fn(GridGeometry::cube(n, half_width, resolution)?, |x| if norm(x) <= radius { 1.0 } else { 0.0 })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn dim(&self) -> usize {
        self.geometry.dim()
    }

    /// Midpoint-rule mass `Σ f · cell volume`.
    pub fn total_mass(&self) -> f64 {
        self.samples.iter().sum::<f64>() * self.geometry.cell_volume()
    }

    /// Expectation of `f` under the normalised density.
    pub fn expectation<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        let sum: f64 = self.samples.iter().sum();
        (0..self.samples.len())
            .filter(|&k| self.samples[k] != 0.0)
            .map(|k| self.samples[k] * f(&self.geometry.center(k)))
            .sum::<f64>()
            / sum
    }

    /// Multilinear interpolation between cell centres, constant beyond the
    /// outermost centres and zero outside the box.
    pub fn interpolate(&self, point: &[f64]) -> f64 {
        let g = &self.geometry;
        if !g.contains(point) {
            return 0.0;
        }
        let n = g.dim();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        for a in 0..n {
            let r = g.resolution[a];
            let s = ((point[a] - g.lower[a]) / g.spacing(a) - 0.5).clamp(0.0, (r - 1) as f64);
            let i = (s.floor() as usize).min(r.saturating_sub(2));
            base[a] = i;
            frac[a] = if r > 1 { s - i as f64 } else { 0.0 };
        }
        let mut value = 0.0;
        let mut index = vec![0usize; n];
        for corner in 0..1usize << n {
            let mut w = 1.0;
            for a in 0..n {
                let up = (corner >> a) & 1 == 1;
                if up && g.resolution[a] == 1 {
                    w = 0.0;
                    break;
                }
                index[a] = base[a] + usize::from(up);
                w *= if up { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                value += w * self.samples[g.flat_index(&index)];
            }
        }
        value
    }

    /// L¹ distance between the two densities after normalising each to unit
    /// mass.
    pub fn l1_distance(&self, other: &GridDensity) -> Result<f64> {
        if !same_geometry(&self.geometry, &other.geometry) {
            return Err(Error::GeometryMismatch("densities live on different grids".into()));
        }
        let (a, b): (f64, f64) = (self.samples.iter().sum(), other.samples.iter().sum());
        Ok(self.samples.iter().zip(&other.samples).map(|(x, y)| (x / a - y / b).abs()).sum())
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

fn same_geometry(a: &GridGeometry, b: &GridGeometry) -> bool {
    a.resolution == b.resolution
        && a.lower.iter().zip(&b.lower).all(|(x, y)| close(*x, *y))
        && a.upper.iter().zip(&b.upper).all(|(x, y)| close(*x, *y))
}

/// Where a needle sits in the ambient space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LeafGeometry {
    /// The first `m` coordinates vary; the others are fixed at the centres of
    /// the grid cells `tail`.
    Slice { tail: Vec<usize>, tail_point: Vec<f64> },
    /// Ray `center + t·direction`, carrying `solid_angle` of the sphere of
    /// directions.
    Ray { center: Vec<f64>, direction: Vec<f64>, solid_angle: f64 },
    /// A bare parameter interval with no embedding.
    Interval,
}

/// Conditional density on one leaf, sampled on a uniform parameter grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Needle {
    pub geometry: LeafGeometry,
    /// Parameter values along each leaf axis.
    pub axes: Vec<Vec<f64>>,
    pub spacing: Vec<f64>,
    /// Normalised so that `Σ density · Π spacing = 1` (all zero on an empty
    /// leaf); first axis fastest.
    pub density: Vec<f64>,
}

impl Needle {
    /// One-dimensional needle with density `∝ g` sampled at `samples` cell
    /// centres of `[a, b]`.
    pub fn from_fn<F: Fn(f64) -> f64>(a: f64, b: f64, samples: usize, g: F) -> Result<Self> {
        if !(a < b) || samples == 0 {
            return Err(Error::InvalidParameter("needle needs a < b and at least one sample".into()));
        }
        let h = (b - a) / samples as f64;
        let t: Vec<f64> = (0..samples).map(|k| a + (k as f64 + 0.5) * h).collect();
        let values: Vec<f64> = t.iter().map(|&t| g(t)).collect();
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter("needle density must be finite and nonnegative".into()));
        }
        let z = values.iter().sum::<f64>() * h;
        if !(z > 0.0) {
            return Err(Error::InvalidParameter("needle density has zero mass".into()));
        }
        Ok(Needle {
            geometry: LeafGeometry::Interval,
            axes: vec![t],
            spacing: vec![h],
            density: values.iter().map(|v| v / z).collect(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn cell(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell()
    }

    /// Parameters of sample `k`.
    pub fn parameters(&self, mut k: usize) -> Vec<f64> {
        self.axes
            .iter()
            .map(|axis| {
                let t = axis[k % axis.len()];
                k /= axis.len();
                t
            })
            .collect()
    }

    /// Ambient position of sample `k` (the parameters themselves for an
    /// interval).
    pub fn point(&self, k: usize) -> Vec<f64> {
        let t = self.parameters(k);
        match &self.geometry {
            LeafGeometry::Slice { tail_point, .. } => t.into_iter().chain(tail_point.iter().copied()).collect(),
            LeafGeometry::Ray { center, direction, .. } => {
                center.iter().zip(direction).map(|(c, d)| c + t[0] * d).collect()
            }
            LeafGeometry::Interval => t,
        }
    }

    /// `∫ f dμ_needle` by the midpoint rule.
    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        (0..self.len()).filter(|&k| self.density[k] != 0.0).map(|k| self.density[k] * f(&self.point(k))).sum::<f64>()
            * self.cell()
    }
}

/// Needles and their mixture weights (nonnegative, summing to one).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disintegration {
    pub needles: Vec<Needle>,
    pub weights: Vec<f64>,
}

/// Disintegration along the leaves of the projection onto the first `m`
/// coordinates. Empty slices keep a zero needle with weight zero.
pub fn slice_disintegration(density: &GridDensity, m: usize, exec: Exec) -> Result<Disintegration> {
    let g = density.geometry();
    let n = g.dim();
    if m == 0 || m >= n {
        return Err(Error::WrongDimension(format!("slices need 1 ≤ m < n, got m = {m}, n = {n}")));
    }
    let head: usize = g.resolution[..m].iter().product();
    let tails = g.len() / head;
    let head_cell: f64 = (0..m).map(|a| g.spacing(a)).product();
    let axes: Vec<Vec<f64>> = (0..m).map(|a| (0..g.resolution[a]).map(|i| g.coordinate(a, i)).collect()).collect();
    let spacing: Vec<f64> = (0..m).map(|a| g.spacing(a)).collect();
    let total: f64 = density.samples().iter().sum();
    let results = par::map_range(exec, tails, |t| {
        let block = &density.samples()[t * head..(t + 1) * head];
        let sum: f64 = block.iter().sum();
        let tail = g.multi_index(t * head)[m..].to_vec();
        let tail_point = tail.iter().enumerate().map(|(k, &i)| g.coordinate(m + k, i)).collect();
        let values = if sum > 0.0 { block.iter().map(|v| v / (sum * head_cell)).collect() } else { vec![0.0; head] };
        let needle = Needle {
            geometry: LeafGeometry::Slice { tail, tail_point },
            axes: axes.clone(),
            spacing: spacing.clone(),
            density: values,
        };
        (needle, sum / total)
    });
    let (needles, weights) = results.into_iter().unzip();
    Ok(Disintegration { needles, weights })
}

/// Sampling of the fan of rays.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialOptions {
    /// Rays in the fan (`n = 2`) or on the Fibonacci sphere (`n = 3`).
    /// Ignored for `n = 1`, which always has the two rays `±1`.
    pub directions: usize,
    /// Samples along the longest ray; all rays share the step.
    pub radial_samples: usize,
}

impl RadialOptions {
    /// `k` directions and `k` radial samples.
    pub fn uniform(k: usize) -> Self {
        RadialOptions { directions: k, radial_samples: k }
    }
}

impl Default for RadialOptions {
    fn default() -> Self {
        Self::uniform(128)
    }
}

/// Unit directions and the solid angle carried by each.
fn ray_directions(n: usize, count: usize) -> Vec<(Vec<f64>, f64)> {
    match n {
        1 => vec![(vec![1.0], 1.0), (vec![-1.0], 1.0)],
        2 => (0..count)
            .map(|j| {
                let theta = 2.0 * PI * j as f64 / count as f64;
                (vec![theta.cos(), theta.sin()], 2.0 * PI / count as f64)
            })
            .collect(),
        _ => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|j| {
                    let z = 1.0 - (2 * j + 1) as f64 / count as f64;
                    let rho = (1.0 - z * z).max(0.0).sqrt();
                    let phi = golden * j as f64;
                    (vec![rho * phi.cos(), rho * phi.sin(), z], 4.0 * PI / count as f64)
                })
                .collect()
        }
    }
}

/// Distance from `center` to the boundary of the box along `direction`.
fn exit_distance(g: &GridGeometry, center: &[f64], direction: &[f64]) -> f64 {
    (0..g.dim())
        .filter(|&a| direction[a] != 0.0)
        .map(|a| {
            let wall = if direction[a] > 0.0 { g.upper[a] } else { g.lower[a] };
            (wall - center[a]) / direction[a]
        })
        .fold(f64::INFINITY, f64::min)
}

/// Disintegration along the rays of `u(x) = ‖x − center‖`, for `n ≤ 3`.
pub fn radial_disintegration(
    density: &GridDensity,
    center: &[f64],
    options: RadialOptions,
    exec: Exec,
) -> Result<Disintegration> {
    let g = density.geometry();
    let n = g.dim();
    if center.len() != n {
        return Err(Error::DimensionMismatch(format!("center has {} coordinates, grid has {n}", center.len())));
    }
    if n > 3 {
        return Err(Error::WrongDimension(format!("radial disintegration supports n ≤ 3, got {n}")));
    }
    if center.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("center"));
    }
    if !g.contains(center) {
        return Err(Error::CenterOutsideBox);
    }
    if (n > 1 && options.directions == 0) || options.radial_samples == 0 {
        return Err(Error::InvalidParameter("radial options need positive counts".into()));
    }
    let rays = ray_directions(n, options.directions);
    let reach: Vec<f64> = rays.iter().map(|(d, _)| exit_distance(g, center, d)).collect();
    let longest = reach.iter().copied().fold(0.0, f64::max);
    let h = longest / options.radial_samples as f64;
    let results = par::map_range(exec, rays.len(), |j| {
        let (direction, solid_angle) = &rays[j];
        let radii: Vec<f64> = (0..).map(|k| (k as f64 + 0.5) * h).take_while(|&r| r < reach[j]).collect();
        let values: Vec<f64> = radii
            .iter()
            .map(|&r| {
                let x: Vec<f64> = center.iter().zip(direction).map(|(c, d)| c + r * d).collect();
                r.powi(n as i32 - 1) * density.interpolate(&x)
            })
            .collect();
        let z = values.iter().sum::<f64>() * h;
        let needle = Needle {
            geometry: LeafGeometry::Ray {
                center: center.to_vec(),
                direction: direction.clone(),
                solid_angle: *solid_angle,
            },
            axes: vec![radii],
            spacing: vec![h],
            density: if z > 0.0 { values.iter().map(|v| v / z).collect() } else { values },
        };
        (needle, z * solid_angle)
    });
    let (needles, raw): (Vec<Needle>, Vec<f64>) = results.into_iter().unzip();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter("density vanishes along every ray".into()));
    }
    Ok(Disintegration { needles, weights: raw.iter().map(|w| w / total).collect() })
}

/// The mixture `Σ wₖ μₖ` as a density on `target`.
///
/// Slice needles must match the target grid and reassemble exactly. Ray
/// needles are interpolated linearly in the radius and, between neighbouring
/// rays, linearly in the angle (`n = 2`) or by inverse angular distance over
/// the three nearest rays (`n = 3`).
pub fn reassemble(needles: &[Needle], weights: &[f64], target: &GridGeometry, exec: Exec) -> Result<GridDensity> {
    target.validate()?;
    if needles.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!("{} needles and {} weights", needles.len(), weights.len())));
    }
    if needles.is_empty() {
        return Err(Error::Empty);
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidParameter("weights must be finite and nonnegative".into()));
    }
    let samples = match &needles[0].geometry {
        LeafGeometry::Slice { .. } => reassemble_slices(needles, weights, target)?,
        LeafGeometry::Ray { .. } => reassemble_rays(needles, weights, target, exec)?,
        LeafGeometry::Interval => return Err(Error::GeometryMismatch("interval needles have no embedding".into())),
    };
    GridDensity::new(target.clone(), samples)
}

fn reassemble_slices(needles: &[Needle], weights: &[f64], target: &GridGeometry) -> Result<Vec<f64>> {
    let m = needles[0].dimension();
    let n = target.dim();
    if m >= n {
        return Err(Error::GeometryMismatch(format!("{m}-dimensional slices in a {n}-dimensional grid")));
    }
    let head: usize = target.resolution[..m].iter().product();
    let tail_cell: f64 = (m..n).map(|a| target.spacing(a)).product();
    let mut samples = vec![0.0; target.len()];
    for (needle, &w) in needles.iter().zip(weights) {
        let LeafGeometry::Slice { tail, .. } = &needle.geometry else {
            return Err(Error::GeometryMismatch("slice and ray needles are mixed".into()));
        };
        let fits = needle.dimension() == m
            && tail.len() == n - m
            && tail.iter().zip(&target.resolution[m..]).all(|(i, r)| i < r)
            && needle.axes.iter().enumerate().all(|(a, axis)| {
                axis.len() == target.resolution[a]
                    && close(needle.spacing[a], target.spacing(a))
                    && axis.iter().enumerate().all(|(i, &t)| close(t, target.coordinate(a, i)))
            });
        if !fits {
            return Err(Error::GeometryMismatch("slice needle does not match the target grid".into()));
        }
        let mut index = vec![0; m];
        index.extend_from_slice(tail);
        let offset = target.flat_index(&index);
        for (s, d) in samples[offset..offset + head].iter_mut().zip(&needle.density) {
            *s += w * d / tail_cell;
        }
    }
    Ok(samples)
}

/// Spatial density represented by one ray: `w·g(r)/(Ω r^{n−1})`, tabulated
/// at the ray's radii.
struct RayProfile {
    direction: Vec<f64>,
    radii: Vec<f64>,
    values: Vec<f64>,
}

impl RayProfile {
    fn at(&self, r: f64) -> f64 {
        let (radii, values) = (&self.radii, &self.values);
        match radii.len() {
            0 => 0.0,
            1 => values[0],
            len => {
                if r <= radii[0] {
                    return values[0];
                }
                if r >= radii[len - 1] {
                    return values[len - 1];
                }
                let k = radii.partition_point(|&t| t <= r) - 1;
                let t = (r - radii[k]) / (radii[k + 1] - radii[k]);
                (1.0 - t) * values[k] + t * values[k + 1]
            }
        }
    }
}

fn reassemble_rays(needles: &[Needle], weights: &[f64], target: &GridGeometry, exec: Exec) -> Result<Vec<f64>> {
    let n = target.dim();
    let LeafGeometry::Ray { center, .. } = &needles[0].geometry else {
        unreachable!("checked by the caller");
    };
    let mut profiles = Vec::with_capacity(needles.len());
    for (needle, &w) in needles.iter().zip(weights) {
        let LeafGeometry::Ray { center: c, direction, solid_angle } = &needle.geometry else {
            return Err(Error::GeometryMismatch("slice and ray needles are mixed".into()));
        };
        if c != center || direction.len() != n || needle.dimension() != 1 || !(*solid_angle > 0.0) {
            return Err(Error::GeometryMismatch("ray needles must share the center and the grid dimension".into()));
        }
        let radii = needle.axes[0].clone();
        let values =
            radii.iter().zip(&needle.density).map(|(&r, &g)| w * g / (solid_angle * r.powi(n as i32 - 1))).collect();
        profiles.push(RayProfile { direction: direction.clone(), radii, values });
    }
    // fan order for n = 2
    let mut order: Vec<(f64, usize)> = profiles.iter().enumerate().map(|(j, p)| (angle_of(&p.direction), j)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));

    let samples = par::map_range(exec, target.len(), |k| {
        let x = target.center(k);
        let v: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
        let r = norm(&v);
        if r == 0.0 {
            return profiles.iter().map(|p| p.at(0.0)).sum::<f64>() / profiles.len() as f64;
        }
        match n {
            1 => {
                let side = profiles.iter().filter(|p| p.direction[0] * v[0] > 0.0).map(|p| p.at(r));
                let (sum, count) = side.fold((0.0, 0usize), |(s, c), y| (s + y, c + 1));
                if count > 0 {
                    sum / count as f64
                } else {
                    0.0
                }
            }
            2 => {
                let phi = angle_of(&v);
                let next = order.partition_point(|&(a, _)| a <= phi);
                let (lo, hi) = (order[(next + order.len() - 1) % order.len()], order[next % order.len()]);
                let span = (hi.0 - lo.0).rem_euclid(2.0 * PI);
                if span == 0.0 {
                    return profiles[lo.1].at(r);
                }
                let t = (phi - lo.0).rem_euclid(2.0 * PI) / span;
                (1.0 - t) * profiles[lo.1].at(r) + t * profiles[hi.1].at(r)
            }
            _ => {
                let unit: Vec<f64> = v.iter().map(|c| c / r).collect();
                let mut nearest: Vec<(f64, usize)> = profiles
                    .iter()
                    .enumerate()
                    .map(|(j, p)| (dot(&unit, &p.direction).clamp(-1.0, 1.0).acos(), j))
                    .collect();
                nearest.sort_by(|a, b| a.0.total_cmp(&b.0));
                nearest.truncate(3);
                if nearest[0].0 < 1e-12 {
                    return profiles[nearest[0].1].at(r);
                }
                let (num, den) =
                    nearest.iter().fold((0.0, 0.0), |(num, den), &(a, j)| (num + profiles[j].at(r) / a, den + 1.0 / a));
                num / den
            }
        }
    });
    Ok(samples)
}

/// Angle in `[0, 2π)` of the first two coordinates.
fn angle_of(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    v[1].atan2(v[0]).rem_euclid(2.0 * PI)
}

/// One moment compared between the density and its mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub name: String,
    pub direct: f64,
    pub mixture: f64,
    pub error: f64,
}

/// `∫ f dμ` against `Σ wₖ ∫ f dμₖ` for `f ∈ {1, xᵢ, xᵢ²}`, both for the
/// normalised density.
pub fn mixture_moments(density: &GridDensity, disintegration: &Disintegration) -> Vec<MomentCheck> {
    let n = density.dim();
    // (name, axis, squared); no axis means the constant 1
    let mut tests = vec![("1".to_string(), None, false)];
    for a in 0..n {
        tests.push((format!("x{a}"), Some(a), false));
        tests.push((format!("x{a}^2"), Some(a), true));
    }
    tests
        .into_iter()
        .map(|(name, axis, squared)| {
            let f = move |x: &[f64]| match axis {
                None => 1.0,
                Some(a) if squared => x[a] * x[a],
                Some(a) => x[a],
            };
            let direct = density.expectation(f);
            let mixture = disintegration
                .needles
                .iter()
                .zip(&disintegration.weights)
                .filter(|(_, &w)| w > 0.0)
                .map(|(needle, &w)| w * needle.integrate(f))
                .sum::<f64>();
            MomentCheck { name, direct, mixture, error: (direct - mixture).abs() }
        })
        .collect()
}

/// Outcome of a CD(κ, N) check along a needle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdReport {
    pub kappa: f64,
    #[serde(with = "crate::float_serde")]
    pub n: f64,
    pub tolerance: f64,
    /// Smallest value of `ρ″ − (ρ′)²/(N − 1) − κ` over the interior samples
    /// (`ρ″ − κ` for `N = ∞`).
    #[serde(with = "crate::float_serde")]
    pub worst_violation: f64,
    /// Parameter at which the worst value occurs.
    pub worst_at: Option<f64>,
    /// Interior samples that entered the verdict.
    pub checked: usize,
    pub pass: bool,
}

/// Minimum number of usable samples for a CD check.
pub const MIN_CD_POINTS: usize = 5;

/// Positive run of the needle after trimming zero ends; interior zeros are an
/// error.
fn positive_run(needle: &Needle) -> Result<(usize, &[f64])> {
    if needle.dimension() != 1 {
        return Err(Error::WrongDimension(format!(
            "CD checks need a 1-dimensional needle, got {}",
            needle.dimension()
        )));
    }
    let g = &needle.density;
    if let Some(k) = g.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::NonpositiveDensity(k));
    }
    let Some(first) = g.iter().position(|&v| v > 0.0) else {
        return Err(Error::TooFewPoints(0));
    };
    let last = g.iter().rposition(|&v| v > 0.0).expect("nonempty");
    if let Some(k) = (first..=last).find(|&k| g[k] == 0.0) {
        return Err(Error::NonpositiveDensity(k));
    }
    if last - first + 1 < MIN_CD_POINTS {
        return Err(Error::TooFewPoints(last - first + 1));
    }
    Ok((first, &g[first..=last]))
}

/// `(g[k−1]/g[k], g[k+1]/g[k])`. All stencils are written in these ratios,
/// which a power-of-two rescaling of `g` leaves bit-for-bit unchanged.
fn neighbour_ratios(g: &[f64], k: usize) -> (f64, f64) {
    (g[k - 1] / g[k], g[k + 1] / g[k])
}

/// Central-difference check of `CD(κ, N)` for the needle density
/// `g = e^{−ρ}`: `ρ″ − (ρ′)²/(N − 1) ≥ κ` at every interior sample.
///
/// For finite `N ≠ 1` the left side is evaluated as `−(N − 1) ψ″/ψ` with
/// `ψ = g^{1/(N−1)}`, which is the same quantity and exact for the power
/// densities that saturate the condition. `N = 1` requires `ρ` to be constant
/// (`|ρ′| ≤ tol`) and `κ ≤ 0`; otherwise the curvature is `−∞`.
/// `N = ±∞` drops the `(ρ′)²` term.
pub fn cd_check_1d(needle: &Needle, kappa: f64, n: f64, tol: f64) -> Result<CdReport> {
    if n.is_nan() || !kappa.is_finite() {
        return Err(Error::InvalidParameter("κ must be finite and N must not be NaN".into()));
    }
    if !(tol >= 0.0) {
        return Err(Error::InvalidParameter("tolerance must be nonnegative".into()));
    }
    let (first, g) = positive_run(needle)?;
    let h = needle.spacing[0];
    let t = &needle.axes[0];
    let values: Vec<f64> = (1..g.len() - 1)
        .map(|k| {
            let (down, up) = neighbour_ratios(g, k);
            if n.is_infinite() {
                -(down.ln() + up.ln()) / (h * h) - kappa
            } else if n == 1.0 {
                let slope = (down / up).ln() / (2.0 * h);
                if slope.abs() <= tol {
                    -kappa
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                let e = 1.0 / (n - 1.0);
                -(n - 1.0) * (down.powf(e) - 2.0 + up.powf(e)) / (h * h) - kappa
            }
        })
        .collect();
    let (pos, worst) =
        values
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (k, v)| if v < best.1 { (k, v) } else { best });
    Ok(CdReport {
        kappa,
        n,
        tolerance: tol,
        worst_violation: worst,
        worst_at: Some(t[first + 1 + pos]),
        checked: values.len(),
        pass: worst >= -tol,
    })
}

/// Truncation-scaled tolerance `10 h² · max(1, max |ρ″|)` over the interior.
pub fn default_cd_tolerance(needle: &Needle) -> Result<f64> {
    let (_, g) = positive_run(needle)?;
    let h = needle.spacing[0];
    let curvature = (1..g.len() - 1)
        .map(|k| {
            let (down, up) = neighbour_ratios(g, k);
            ((down.ln() + up.ln()) / (h * h)).abs()
        })
        .fold(1.0, f64::max);
    Ok(10.0 * h * h * curvature)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_indexing() {
        let g = GridGeometry::new(vec![0.0, -1.0], vec![2.0, 1.0], vec![4, 2]).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g.multi_index(5), vec![1, 1]);
        assert_eq!(g.flat_index(&[1, 1]), 5);
        assert_eq!(g.center(5), vec![0.75, 0.5]);
        assert_eq!(g.cell_volume(), 0.5);
        assert!(GridGeometry::new(vec![0.0], vec![0.0], vec![1]).is_err());
        assert!(GridGeometry::new(vec![0.0], vec![1.0], vec![0]).is_err());
    }

    #[test]
    fn density_validation() {
        let g = GridGeometry::cube(1, 1.0, 2).unwrap();
        assert!(GridDensity::new(g.clone(), vec![0.0, 0.0]).is_err());
        assert!(GridDensity::new(g.clone(), vec![-1.0, 2.0]).is_err());
        assert!(GridDensity::new(g.clone(), vec![1.0]).is_err());
        assert!(matches!(GridDensity::new(g, vec![f64::NAN, 1.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn interpolation_is_exact_for_affine_densities() {
        let d = GridDensity::from_fn(GridGeometry::cube(2, 1.0, 8).unwrap(), |x| 3.0 + x[0] - 0.5 * x[1]).unwrap();
        for p in [[0.1, 0.2], [-0.8, 0.3], [0.33, -0.77]] {
            assert!((d.interpolate(&p) - (3.0 + p[0] - 0.5 * p[1])).abs() < 1e-12);
        }
        assert_eq!(d.interpolate(&[1.5, 0.0]), 0.0);
        // beyond the outermost centres the value is held
        assert!((d.interpolate(&[0.99, 0.0]) - d.interpolate(&[0.875, 0.0])).abs() < 1e-12);
    }

    #[test]
    fn uniform_slices_have_equal_weights() {
        let d = GridDensity::uniform(2, 1.0, 10).unwrap();
        let dis = slice_disintegration(&d, 1, Exec::Sequential).unwrap();
        assert_eq!(dis.needles.len(), 10);
        for (needle, w) in dis.needles.iter().zip(&dis.weights) {
            assert!((w - 0.1).abs() < 1e-15);
            assert!(needle.density.iter().all(|&v| (v - 0.5).abs() < 1e-14));
            assert!((needle.mass() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn product_density_slices() {
        let f = |t: f64| 1.0 + t * t;
        let gfun = |t: f64| (-t).exp();
        let d = GridDensity::from_fn(GridGeometry::cube(2, 1.0, 12).unwrap(), |x| f(x[0]) * gfun(x[1])).unwrap();
        let dis = slice_disintegration(&d, 1, Exec::Sequential).unwrap();
        let first = &dis.needles[0].density;
        for needle in &dis.needles {
            for (a, b) in needle.density.iter().zip(first) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let ratio = dis.weights[1] / dis.weights[0];
        let h = d.geometry().spacing(1);
        assert!((ratio - (-h).exp()).abs() < 1e-14);
    }

    #[test]
    fn empty_slice_gets_zero_weight() {
        let d = GridDensity::from_fn(GridGeometry::cube(2, 1.0, 4).unwrap(), |x| if x[1] > 0.0 { 1.0 } else { 0.0 })
            .unwrap();
        let dis = slice_disintegration(&d, 1, Exec::Sequential).unwrap();
        assert_eq!(dis.weights, vec![0.0, 0.0, 0.5, 0.5]);
        assert!(dis.needles[0].density.iter().all(|&v| v == 0.0));
        let back = reassemble(&dis.needles, &dis.weights, d.geometry(), Exec::Sequential).unwrap();
        assert!(back.l1_distance(&d).unwrap() < 1e-15);
    }

    #[test]
    fn slice_reassembly_in_three_dimensions() {
        let d =
            GridDensity::from_fn(GridGeometry::new(vec![0.0; 3], vec![1.0, 2.0, 3.0], vec![5, 4, 3]).unwrap(), |x| {
                1.0 + x[0] * x[1] + x[2] * x[2]
            })
            .unwrap();
        for m in [1, 2] {
            let dis = slice_disintegration(&d, m, Exec::Sequential).unwrap();
            assert!((dis.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let back = reassemble(&dis.needles, &dis.weights, d.geometry(), Exec::Sequential).unwrap();
            assert!(back.l1_distance(&d).unwrap() < 1e-13);
            for check in mixture_moments(&d, &dis) {
                assert!(check.error < 1e-12, "{check:?}");
            }
        }
        assert!(matches!(slice_disintegration(&d, 3, Exec::Sequential), Err(Error::WrongDimension(_))));
    }

    #[test]
    fn slice_geometry_mismatch() {
        let d = GridDensity::uniform(2, 1.0, 6).unwrap();
        let dis = slice_disintegration(&d, 1, Exec::Sequential).unwrap();
        let other = GridGeometry::cube(2, 1.0, 7).unwrap();
        assert!(matches!(
            reassemble(&dis.needles, &dis.weights, &other, Exec::Sequential),
            Err(Error::GeometryMismatch(_))
        ));
        let shifted = GridGeometry::new(vec![-1.0, -1.0], vec![1.5, 1.0], vec![6, 6]).unwrap();
        assert!(matches!(
            reassemble(&dis.needles, &dis.weights, &shifted, Exec::Sequential),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn single_slice_needle_is_embedded() {
        let d = GridDensity::gaussian(2, 2.0, 8).unwrap();
        let dis = slice_disintegration(&d, 1, Exec::Sequential).unwrap();
        let needle = dis.needles[3].clone();
        let back = reassemble(std::slice::from_ref(&needle), &[1.0], d.geometry(), Exec::Sequential).unwrap();
        let h = d.geometry().spacing(1);
        for k in 0..d.geometry().len() {
            let idx = d.geometry().multi_index(k);
            let expected = if idx[1] == 3 { needle.density[idx[0]] / h } else { 0.0 };
            assert_eq!(back.samples()[k], expected);
        }
    }

    #[test]
    fn radial_needles_of_lebesgue() {
        // disc of radius 1 well inside the box: needles ∝ r on [0, 1]
        let d = GridDensity::ball(2, 1.0, 1.5, 301).unwrap();
        let dis = radial_disintegration(
            &d,
            &[0.0, 0.0],
            RadialOptions { directions: 16, radial_samples: 400 },
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(dis.needles.len(), 16);
        for (needle, w) in dis.needles.iter().zip(&dis.weights) {
            assert!((w - 1.0 / 16.0).abs() < 2e-2);
            let mean = needle.integrate(norm);
            // mean of density 2r on [0, 1] is 2/3
            assert!((mean - 2.0 / 3.0).abs() < 2e-2, "{mean}");
        }
        // uniform cube in 3-d: density r² f is exactly r² while inside
        let cube = GridDensity::uniform(3, 1.0, 4).unwrap();
        let dis = radial_disintegration(&cube, &[0.0; 3], RadialOptions::uniform(20), Exec::Sequential).unwrap();
        let needle = &dis.needles[0];
        let t = &needle.axes[0];
        for k in 1..needle.len() {
            let ratio = needle.density[k] / needle.density[0];
            assert!((ratio - (t[k] / t[0]).powi(2)).abs() < 1e-9);
        }
    }

    #[test]
    fn radial_gaussian_needles() {
        let d = GridDensity::gaussian(2, 4.0, 129).unwrap();
        let dis = radial_disintegration(&d, &[0.0, 0.0], RadialOptions::uniform(64), Exec::Sequential).unwrap();
        assert!((dis.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let needle = &dis.needles[5];
        // density ∝ r e^{−r²/2}: its mean is √(π/2)
        let mean = needle.integrate(norm);
        assert!((mean - (PI / 2.0).sqrt()).abs() < 1e-2, "{mean}");
    }

    #[test]
    fn radial_errors() {
        let d = GridDensity::uniform(2, 1.0, 4).unwrap();
        assert!(matches!(
            radial_disintegration(&d, &[2.0, 0.0], RadialOptions::default(), Exec::Sequential),
            Err(Error::CenterOutsideBox)
        ));
        let d4 = GridDensity::uniform(4, 1.0, 2).unwrap();
        assert!(matches!(
            radial_disintegration(&d4, &[0.0; 4], RadialOptions::default(), Exec::Sequential),
            Err(Error::WrongDimension(_))
        ));
    }

    #[test]
    fn radial_reassembly_in_one_and_three_dimensions() {
        let line = GridDensity::from_fn(GridGeometry::cube(1, 1.0, 40).unwrap(), |x| 1.0 + x[0]).unwrap();
        let dis = radial_disintegration(&line, &[0.0], RadialOptions::uniform(400), Exec::Sequential).unwrap();
        assert_eq!(dis.needles.len(), 2);
        let back = reassemble(&dis.needles, &dis.weights, line.geometry(), Exec::Sequential).unwrap();
        assert!(back.l1_distance(&line).unwrap() < 1e-2);

        let ball = GridDensity::gaussian(3, 3.0, 16).unwrap();
        let coarse = radial_disintegration(&ball, &[0.0; 3], RadialOptions::uniform(50), Exec::Sequential).unwrap();
        let fine = radial_disintegration(&ball, &[0.0; 3], RadialOptions::uniform(400), Exec::Sequential).unwrap();
        let e1 = reassemble(&coarse.needles, &coarse.weights, ball.geometry(), Exec::Sequential)
            .unwrap()
            .l1_distance(&ball)
            .unwrap();
        let e2 = reassemble(&fine.needles, &fine.weights, ball.geometry(), Exec::Sequential)
            .unwrap()
            .l1_distance(&ball)
            .unwrap();
        assert!(e2 < e1 && e2 < 0.05, "{e1} {e2}");
    }

    #[test]
    fn cd_gaussian_and_uniform() {
        let gauss = Needle::from_fn(-3.0, 3.0, 600, |t| (-0.5 * t * t).exp()).unwrap();
        let tol = default_cd_tolerance(&gauss).unwrap();
        assert!(cd_check_1d(&gauss, 1.0, f64::INFINITY, tol).unwrap().pass);
        assert!(!cd_check_1d(&gauss, 1.01, f64::INFINITY, tol).unwrap().pass);
        let flat = Needle::from_fn(0.0, 1.0, 100, |_| 1.0).unwrap();
        let tol = default_cd_tolerance(&flat).unwrap();
        assert!(cd_check_1d(&flat, 0.0, f64::INFINITY, tol).unwrap().pass);
        let fail = cd_check_1d(&flat, 0.1, f64::INFINITY, tol).unwrap();
        assert!(!fail.pass);
        assert!((fail.worst_violation + 0.1).abs() < 1e-9);
        // constant ρ is the only density allowed at N = 1
        assert!(cd_check_1d(&flat, 0.0, 1.0, 1e-9).unwrap().pass);
        let ramp = Needle::from_fn(0.0, 1.0, 100, |t| 1.0 + t).unwrap();
        assert_eq!(cd_check_1d(&ramp, 0.0, 1.0, 1e-9).unwrap().worst_violation, f64::NEG_INFINITY);
    }

    #[test]
    fn cd_power_density_is_exact() {
        // g = t²: ρ″ − (ρ′)²/2 = 0, and √g is linear
        let needle = Needle::from_fn(0.0, 1.0, 200, |t| t * t).unwrap();
        let report = cd_check_1d(&needle, 0.0, 3.0, 0.0).unwrap();
        assert!(report.worst_violation.abs() < 1e-8, "{report:?}");
        assert!(!cd_check_1d(&needle, 0.0, 2.5, 1e-6).unwrap().pass);
        // N < 1 makes the condition weaker than N = ∞
        let gauss = Needle::from_fn(-2.0, 2.0, 200, |t| (-0.5 * t * t).exp()).unwrap();
        let neg = cd_check_1d(&gauss, 1.0, -2.0, 1e-6).unwrap();
        assert!(neg.pass && neg.worst_violation > 0.0);
    }

    #[test]
    fn cd_input_errors() {
        let short = Needle::from_fn(0.0, 1.0, 4, |_| 1.0).unwrap();
        assert!(matches!(cd_check_1d(&short, 0.0, 2.0, 0.0), Err(Error::TooFewPoints(4))));
        let holey = Needle::from_fn(0.0, 1.0, 10, |t| if (0.4..0.5).contains(&t) { 0.0 } else { 1.0 }).unwrap();
        assert!(matches!(cd_check_1d(&holey, 0.0, 2.0, 0.0), Err(Error::NonpositiveDensity(4))));
        // zero ends are trimmed
        let trimmed = Needle::from_fn(0.0, 1.0, 10, |t| if !(0.2..=0.9).contains(&t) { 0.0 } else { 1.0 }).unwrap();
        assert_eq!(cd_check_1d(&trimmed, 0.0, f64::INFINITY, 1e-12).unwrap().checked, 5);
        let d = GridDensity::uniform(3, 1.0, 3).unwrap();
        let dis = slice_disintegration(&d, 2, Exec::Sequential).unwrap();
        assert!(matches!(cd_check_1d(&dis.needles[0], 0.0, 2.0, 0.0), Err(Error::WrongDimension(_))));
    }

    #[test]
    fn cd_invariant_under_scaling() {
        let needle = Needle::from_fn(0.1, 2.0, 50, |t| t.powf(1.5) * (-t).exp()).unwrap();
        let mut scaled = needle.clone();
        scaled.density.iter_mut().for_each(|v| *v *= 8.0);
        for n in [f64::INFINITY, 3.0, -1.0] {
            let a = cd_check_1d(&needle, 0.2, n, 1e-3).unwrap();
            let b = cd_check_1d(&scaled, 0.2, n, 1e-3).unwrap();
            assert!((a.worst_violation - b.worst_violation).abs() <= 1e-9 * (1.0 + a.worst_violation.abs()));
            assert_eq!(a.pass, b.pass);
        }
    }
}
