//! Point clouds, vector-valued measures, couplings and potentials, together
//! with the elementary functionals on them (total variation, transport cost,
//! marginals, Lipschitz constant, pairing).
//!
//! All vector data is stored row-major in flat `Vec<f64>` buffers: row `i` of
//! a measure with target dimension `m` is `weights[i*m..(i+1)*m]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::par::{self, Exec};

/// Relative tolerance on the total mass of a transport instance.
pub const TOTAL_MASS_TOLERANCE: f64 = 1e-12;

/// A finite set of distinct points in `R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch("ambient dimension must be positive".into()));
        }
        if coords.is_empty() {
            return Err(Error::Empty);
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("points"));
        }
        let cloud = PointCloud { dim, coords };
        for i in 0..cloud.len() {
            for j in i + 1..cloud.len() {
                if cloud.point(i) == cloud.point(j) {
                    return Err(Error::DuplicatePoint(i, j));
                }
            }
        }
        Ok(cloud)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().ok_or(Error::Empty)?.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::DimensionMismatch(format!("point {i} has {} coordinates, expected {dim}", r.len())));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.coords.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.point(i).iter().zip(self.point(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// The cloud with every coordinate multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::InvalidParameter("scale factor must be positive".into()));
        }
        Self::new(self.dim, self.coords.iter().map(|c| c * factor).collect())
    }
}

/// Symmetric matrix of Euclidean distances with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn euclidean(cloud: &PointCloud, exec: Exec) -> Self {
        let n = cloud.len();
        let rows = par::map_range(exec, n, |i| (0..n).map(|j| cloud.distance(i, j)).collect::<Vec<_>>());
        let mut data = rows.concat();
        // enforce exact symmetry; distance(i, j) and distance(j, i) may differ in rounding
        for i in 0..n {
            for j in 0..i {
                data[i * n + j] = data[j * n + i];
            }
        }
        DistanceMatrix { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// A measure on a point cloud with values in `R^m`: one weight vector per point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorMeasure {
    target_dim: usize,
    weights: Vec<f64>,
}

impl VectorMeasure {
    pub fn new(target_dim: usize, weights: Vec<f64>) -> Result<Self> {
        if target_dim == 0 {
            return Err(Error::DimensionMismatch("target dimension must be positive".into()));
        }
        if !weights.len().is_multiple_of(target_dim) {
            return Err(Error::DimensionMismatch(format!(
                "{} weight entries do not split into vectors of dimension {target_dim}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("weights"));
        }
        Ok(VectorMeasure { target_dim, weights })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().ok_or(Error::Empty)?.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return Err(Error::DimensionMismatch(format!("weight {i} has {} components, expected {m}", r.len())));
        }
        Self::new(m, rows.concat())
    }

    pub fn zeros(len: usize, target_dim: usize) -> Self {
        VectorMeasure { target_dim, weights: vec![0.0; len * target_dim] }
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn len(&self) -> usize {
        self.weights.len() / self.target_dim
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, i: usize) -> &[f64] {
        &self.weights[i * self.target_dim..(i + 1) * self.target_dim]
    }

    pub fn weight_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.weights[i * self.target_dim..(i + 1) * self.target_dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.weights.chunks(self.target_dim).map(<[f64]>::to_vec).collect()
    }

    /// `μ(X) = Σᵢ μᵢ`.
    pub fn total_mass(&self) -> Vec<f64> {
        let mut total = vec![0.0; self.target_dim];
        for w in self.weights.chunks(self.target_dim) {
            total.iter_mut().zip(w).for_each(|(t, x)| *t += x);
        }
        total
    }

    /// Mass of the subset `indices`.
    pub fn mass_of(&self, indices: &[usize]) -> Vec<f64> {
        let mut total = vec![0.0; self.target_dim];
        for &i in indices {
            total.iter_mut().zip(self.weight(i)).for_each(|(t, x)| *t += x);
        }
        total
    }

    /// Total variation `‖μ‖(X) = Σᵢ ‖μᵢ‖` (Euclidean norm on `R^m`).
    pub fn total_variation(&self) -> f64 {
        self.weights.chunks(self.target_dim).map(norm).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        VectorMeasure { target_dim: self.target_dim, weights: self.weights.iter().map(|w| w * c).collect() }
    }

    pub fn plus(&self, other: &Self) -> Result<Self> {
        if self.target_dim != other.target_dim || self.len() != other.len() {
            return Err(Error::DimensionMismatch("measures live on different supports".into()));
        }
        Ok(VectorMeasure {
            target_dim: self.target_dim,
            weights: self.weights.iter().zip(&other.weights).map(|(a, b)| a + b).collect(),
        })
    }

    /// Largest componentwise difference to another measure on the same support.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Euclidean norm of the difference, taken over all components.
    pub fn l2_diff(&self, other: &Self) -> f64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

/// An `R^m`-valued function on the points of a cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialField {
    target_dim: usize,
    values: Vec<f64>,
}

/// Result of [`PotentialField::lipschitz_constant`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub constant: f64,
    /// First maximising pair in lexicographic order; `None` for a single point,
    /// whose constant is 0 by convention.
    pub pair: Option<(usize, usize)>,
}

impl PotentialField {
    pub fn new(target_dim: usize, values: Vec<f64>) -> Result<Self> {
        if target_dim == 0 || !values.len().is_multiple_of(target_dim) {
            return Err(Error::DimensionMismatch("potential values do not match target dimension".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("potential"));
        }
        Ok(PotentialField { target_dim, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().ok_or(Error::Empty)?.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::DimensionMismatch("potential rows have different lengths".into()));
        }
        Self::new(m, rows.concat())
    }

    pub fn zeros(len: usize, target_dim: usize) -> Self {
        PotentialField { target_dim, values: vec![0.0; len * target_dim] }
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.target_dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.target_dim..(i + 1) * self.target_dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.target_dim).map(<[f64]>::to_vec).collect()
    }

    /// `‖u(i) − u(j)‖`.
    pub fn gap(&self, i: usize, j: usize) -> f64 {
        self.value(i).iter().zip(self.value(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// Shifts the field so that the value at index 0 is the zero vector.
    pub fn normalized_at_first(&self) -> Self {
        let base = self.value(0).to_vec();
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.target_dim) {
            row.iter_mut().zip(&base).for_each(|(v, b)| *v -= b);
        }
        PotentialField { target_dim: self.target_dim, values }
    }

    pub fn scaled(&self, c: f64) -> Self {
        PotentialField { target_dim: self.target_dim, values: self.values.iter().map(|v| v * c).collect() }
    }

    /// Adds the constant vector `shift` to every value.
    pub fn shifted(&self, shift: &[f64]) -> Self {
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.target_dim) {
            row.iter_mut().zip(shift).for_each(|(v, s)| *v += s);
        }
        PotentialField { target_dim: self.target_dim, values }
    }

    /// Exact `max_{i<j} ‖u(i) − u(j)‖ / d(i, j)` over all pairs of the cloud.
    pub fn lipschitz_constant(&self, cloud: &PointCloud) -> Result<LipschitzEstimate> {
        self.lipschitz_constant_with(cloud, Exec::default())
    }

    pub fn lipschitz_constant_with(&self, cloud: &PointCloud, exec: Exec) -> Result<LipschitzEstimate> {
        if self.len() != cloud.len() {
            return Err(Error::DimensionMismatch(format!(
                "potential has {} values for {} points",
                self.len(),
                cloud.len()
            )));
        }
        let n = cloud.len();
        if n < 2 {
            return Ok(LipschitzEstimate { constant: 0.0, pair: None });
        }
        let rows = par::map_range(exec, n - 1, |i| {
            let mut best = (f64::NEG_INFINITY, i + 1);
            for j in i + 1..n {
                let r = self.gap(i, j) / cloud.distance(i, j);
                if r > best.0 {
                    best = (r, j);
                }
            }
            best
        });
        let mut best = (f64::NEG_INFINITY, (0, 1));
        for (i, (r, j)) in rows.into_iter().enumerate() {
            if r > best.0 {
                best = (r, (i, j));
            }
        }
        Ok(LipschitzEstimate { constant: best.0, pair: Some(best.1) })
    }

    /// Dual objective `Σᵢ ⟨u(i), μᵢ⟩`.
    pub fn pairing(&self, measure: &VectorMeasure) -> Result<f64> {
        if self.target_dim != measure.target_dim() || self.len() != measure.len() {
            return Err(Error::DimensionMismatch(format!(
                "potential is {}x{}, measure is {}x{}",
                self.len(),
                self.target_dim,
                measure.len(),
                measure.target_dim()
            )));
        }
        Ok(self
            .values
            .chunks(self.target_dim)
            .zip(measure.as_slice().chunks(self.target_dim))
            .map(|(u, w)| dot(u, w))
            .sum())
    }
}

/// An `R^m`-valued coupling on unordered point pairs.
///
/// The entry `(i, j, w)` stands for the flow `w` leaving `i` towards `j`; it
/// has the same marginal effect as `(j, i, −w)`, so at most one entry is kept
/// per unordered pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorCoupling {
    target_dim: usize,
    pairs: Vec<(usize, usize)>,
    flows: Vec<f64>,
}

impl VectorCoupling {
    pub fn empty(target_dim: usize) -> Self {
        VectorCoupling { target_dim, pairs: Vec::new(), flows: Vec::new() }
    }

    pub fn new(target_dim: usize, pairs: Vec<(usize, usize)>, flows: Vec<f64>) -> Result<Self> {
        if target_dim == 0 || flows.len() != pairs.len() * target_dim {
            return Err(Error::DimensionMismatch("flow buffer does not match pair list".into()));
        }
        if flows.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("flows"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j) in &pairs {
            if i == j {
                return Err(Error::InvalidParameter(format!("coupling entry ({i}, {i}) is a loop")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::InvalidParameter(format!("pair ({i}, {j}) appears twice")));
            }
        }
        Ok(VectorCoupling { target_dim, pairs, flows })
    }

    pub fn from_entries(target_dim: usize, entries: &[(usize, usize, Vec<f64>)]) -> Result<Self> {
        if entries.iter().any(|e| e.2.len() != target_dim) {
            return Err(Error::DimensionMismatch("flow vector of wrong length".into()));
        }
        let pairs = entries.iter().map(|e| (e.0, e.1)).collect();
        let flows = entries.iter().flat_map(|e| e.2.iter().copied()).collect();
        Self::new(target_dim, pairs, flows)
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, e: usize) -> (usize, usize) {
        self.pairs[e]
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn flow(&self, e: usize) -> &[f64] {
        &self.flows[e * self.target_dim..(e + 1) * self.target_dim]
    }

    pub fn flow_mut(&mut self, e: usize) -> &mut [f64] {
        &mut self.flows[e * self.target_dim..(e + 1) * self.target_dim]
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, &[f64])> + '_ {
        self.pairs.iter().zip(self.flows.chunks(self.target_dim)).map(|(&(i, j), f)| (i, j, f))
    }

    /// `‖π‖(X×X) = Σₑ ‖flowₑ‖`.
    pub fn total_variation(&self) -> f64 {
        self.flows.chunks(self.target_dim).map(norm).sum()
    }

    /// `∫ d(x, y) d‖π‖ = Σₑ ‖flowₑ‖ d(xᵢ, xⱼ)`.
    pub fn cost(&self, cloud: &PointCloud) -> f64 {
        self.entries().map(|(i, j, f)| norm(f) * cloud.distance(i, j)).sum()
    }

    fn check_support(&self, len: usize) -> Result<()> {
        match self.pairs.iter().find(|&&(i, j)| i >= len || j >= len) {
            Some(&(i, j)) => {
                Err(Error::DimensionMismatch(format!("coupling entry ({i}, {j}) outside a support of {len} points")))
            }
            None => Ok(()),
        }
    }

    /// First and second marginals `(P₁π, P₂π)` on a support of `len` points.
    pub fn marginals(&self, len: usize) -> Result<(VectorMeasure, VectorMeasure)> {
        self.check_support(len)?;
        let mut first = VectorMeasure::zeros(len, self.target_dim);
        let mut second = VectorMeasure::zeros(len, self.target_dim);
        for (i, j, f) in self.entries() {
            first.weight_mut(i).iter_mut().zip(f).for_each(|(a, b)| *a += b);
            second.weight_mut(j).iter_mut().zip(f).for_each(|(a, b)| *a += b);
        }
        Ok((first, second))
    }

    /// `P₁π − P₂π`, accumulated edge by edge in entry order.
    pub fn net(&self, len: usize) -> Result<VectorMeasure> {
        self.check_support(len)?;
        let mut out = VectorMeasure::zeros(len, self.target_dim);
        for (i, j, f) in self.entries() {
            out.weight_mut(i).iter_mut().zip(f).for_each(|(a, b)| *a += b);
            out.weight_mut(j).iter_mut().zip(f).for_each(|(a, b)| *a -= b);
        }
        Ok(out)
    }

    /// Scalar first marginal of the total variation, `P₁‖π‖`, under the
    /// orientation stored in the entries.
    pub fn first_marginal_of_variation(&self, len: usize) -> Result<Vec<f64>> {
        self.check_support(len)?;
        let mut out = vec![0.0; len];
        for (i, _, f) in self.entries() {
            out[i] += norm(f);
        }
        Ok(out)
    }

    /// Drops entries whose flow is exactly zero.
    pub fn pruned(&self) -> Self {
        let mut pairs = Vec::new();
        let mut flows = Vec::new();
        for (i, j, f) in self.entries() {
            if f.iter().any(|&x| x != 0.0) {
                pairs.push((i, j));
                flows.extend_from_slice(f);
            }
        }
        VectorCoupling { target_dim: self.target_dim, pairs, flows }
    }

    pub fn scaled(&self, c: f64) -> Self {
        VectorCoupling {
            target_dim: self.target_dim,
            pairs: self.pairs.clone(),
            flows: self.flows.iter().map(|f| f * c).collect(),
        }
    }
}

/// A validated transport problem: a zero-mass vector measure on a point cloud
/// with cached Euclidean distances.
#[derive(Clone, Debug)]
pub struct Instance {
    cloud: PointCloud,
    measure: VectorMeasure,
    distances: DistanceMatrix,
}

impl Instance {
    /// Builds an instance from coordinate rows and weight rows.
    pub fn build(points: &[Vec<f64>], weights: &[Vec<f64>]) -> Result<Self> {
        if points.is_empty() || weights.is_empty() {
            return Err(Error::Empty);
        }
        if points.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!("{} points but {} weights", points.len(), weights.len())));
        }
        let cloud = PointCloud::from_rows(points)?;
        let measure = VectorMeasure::from_rows(weights)?;
        Self::from_parts(cloud, measure)
    }

    pub fn from_parts(cloud: PointCloud, measure: VectorMeasure) -> Result<Self> {
        if cloud.len() != measure.len() {
            return Err(Error::DimensionMismatch(format!("{} points but {} weights", cloud.len(), measure.len())));
        }
        check_zero_mass(&measure)?;
        let distances = DistanceMatrix::euclidean(&cloud, Exec::default());
        Ok(Instance { cloud, measure, distances })
    }

    /// Same cloud (and distance cache), different measure.
    pub fn with_measure(&self, measure: VectorMeasure) -> Result<Self> {
        if measure.len() != self.cloud.len() {
            return Err(Error::DimensionMismatch("measure does not fit the cloud".into()));
        }
        check_zero_mass(&measure)?;
        Ok(Instance { cloud: self.cloud.clone(), measure, distances: self.distances.clone() })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn measure(&self) -> &VectorMeasure {
        &self.measure
    }

    pub fn distances(&self) -> &DistanceMatrix {
        &self.distances
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn ambient_dim(&self) -> usize {
        self.cloud.dim()
    }

    pub fn target_dim(&self) -> usize {
        self.measure.target_dim()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances.get(i, j)
    }

    /// `‖net(π) − μ‖` over all components.
    pub fn feasibility_residual(&self, coupling: &VectorCoupling) -> Result<f64> {
        if coupling.target_dim() != self.target_dim() {
            return Err(Error::DimensionMismatch("coupling and measure target dimensions differ".into()));
        }
        Ok(coupling.net(self.len())?.l2_diff(&self.measure))
    }

    pub fn to_file(&self) -> InstanceFile {
        InstanceFile {
            n: self.ambient_dim(),
            m: self.target_dim(),
            points: self.cloud.rows(),
            weights: self.measure.rows(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(text)?;
        file.into_instance()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }
}

fn check_zero_mass(measure: &VectorMeasure) -> Result<()> {
    let total = measure.total_mass();
    let tolerance = TOTAL_MASS_TOLERANCE * measure.total_variation();
    if total.iter().any(|t| t.abs() > tolerance) {
        return Err(Error::NonzeroTotalMass { residual: total, tolerance });
    }
    Ok(())
}

/// On-disk instance schema: `{ "n", "m", "points": [[f64; n]; N], "weights": [[f64; m]; N] }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub n: usize,
    pub m: usize,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl InstanceFile {
    pub fn into_instance(self) -> Result<Instance> {
        if let Some(i) = self.points.iter().position(|p| p.len() != self.n) {
            return Err(Error::DimensionMismatch(format!("point {i} does not have n = {} coordinates", self.n)));
        }
        if let Some(i) = self.weights.iter().position(|w| w.len() != self.m) {
            return Err(Error::DimensionMismatch(format!("weight {i} does not have m = {} components", self.m)));
        }
        Instance::build(&self.points, &self.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_point() -> Instance {
        Instance::build(&[vec![0.0, 0.0], vec![3.0, 4.0]], &[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap()
    }

    #[test]
    fn build_instance_examples() {
        let inst = two_point();
        assert_eq!(inst.distance(0, 1), 5.0);
        let err = Instance::build(&[vec![0.0, 0.0], vec![3.0, 4.0]], &[vec![1.0, 0.0], vec![-0.5, 0.0]]);
        assert!(matches!(err, Err(Error::NonzeroTotalMass { .. })));
        let err = Instance::build(&[vec![1.0, 2.0], vec![1.0, 2.0]], &[vec![1.0], vec![-1.0]]);
        assert!(matches!(err, Err(Error::DuplicatePoint(0, 1))));
        let err = Instance::build(&[vec![1.0, 2.0], vec![1.0]], &[vec![1.0], vec![-1.0]]);
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
        let err = Instance::build(&[vec![1.0], vec![2.0]], &[vec![1.0], vec![-1.0, 0.0]]);
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
        assert!(matches!(Instance::build(&[], &[]), Err(Error::Empty)));
    }

    #[test]
    fn zero_mass_tolerance_is_relative() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(Instance::build(&pts, &[vec![1e20], vec![-1e20 + 1e6]]).is_ok());
        assert!(Instance::build(&pts, &[vec![1.0], vec![-1.0 + 1e-9]]).is_err());
    }

    #[test]
    fn marginals_examples() {
        let w = vec![1.0, 2.0];
        let pi = VectorCoupling::from_entries(2, &[(0, 1, w.clone())]).unwrap();
        let (p1, p2) = pi.marginals(2).unwrap();
        assert_eq!(p1.weight(0), &w[..]);
        assert_eq!(p1.weight(1), &[0.0, 0.0]);
        assert_eq!(p2.weight(1), &w[..]);
        assert_eq!(p2.weight(0), &[0.0, 0.0]);

        let (p1, p2) = VectorCoupling::empty(2).marginals(3).unwrap();
        assert_eq!(p1, VectorMeasure::zeros(3, 2));
        assert_eq!(p2, VectorMeasure::zeros(3, 2));

        // (1, 0, w) is stored as its own entry here only through the raw
        // constructor, which rejects duplicated unordered pairs; its marginal
        // effect equals (0, 1, -w)
        let a = VectorCoupling::from_entries(2, &[(1, 0, w.clone())]).unwrap().net(2).unwrap();
        let b = VectorCoupling::from_entries(2, &[(0, 1, vec![-1.0, -2.0])]).unwrap().net(2).unwrap();
        assert_eq!(a, b);
        let cancel = a.plus(&VectorCoupling::from_entries(2, &[(0, 1, w)]).unwrap().net(2).unwrap()).unwrap();
        assert_eq!(cancel, VectorMeasure::zeros(2, 2));
    }

    #[test]
    fn duplicate_pairs_rejected() {
        let e = VectorCoupling::from_entries(1, &[(0, 1, vec![1.0]), (1, 0, vec![1.0])]);
        assert!(e.is_err());
        assert!(VectorCoupling::from_entries(1, &[(2, 2, vec![1.0])]).is_err());
    }

    #[test]
    fn variation_and_cost_examples() {
        let inst = two_point();
        let pi = VectorCoupling::from_entries(2, &[(0, 1, vec![1.0, 0.0])]).unwrap();
        assert_eq!(pi.total_variation(), 1.0);
        assert_eq!(pi.cost(inst.cloud()), 5.0);
        let empty = VectorCoupling::empty(2);
        assert_eq!(empty.total_variation(), 0.0);
        assert_eq!(empty.cost(inst.cloud()), 0.0);
        let cloud = PointCloud::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let pi = VectorCoupling::from_entries(2, &[(0, 1, vec![3.0, 4.0])]).unwrap();
        assert_eq!(pi.total_variation(), 5.0);
        assert_eq!(pi.cost(&cloud), 10.0);
    }

    #[test]
    fn pairing_examples() {
        let inst = two_point();
        let mu = inst.measure();
        assert_eq!(PotentialField::zeros(2, 2).pairing(mu).unwrap(), 0.0);
        let c = PotentialField::from_rows(&[vec![3.0, -7.0], vec![3.0, -7.0]]).unwrap();
        assert_eq!(c.pairing(mu).unwrap(), 0.0);
        // μ = w(δ_x − δ_y) with w = (1, 0); u(z) = ⟨z, (x − y)/d⟩ w/‖w‖
        let (x, y) = (inst.cloud().point(0), inst.cloud().point(1));
        let d = inst.distance(0, 1);
        let dir: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - b) / d).collect();
        let rows: Vec<Vec<f64>> = (0..2).map(|i| vec![dot(inst.cloud().point(i), &dir), 0.0]).collect();
        let u = PotentialField::from_rows(&rows).unwrap();
        assert_abs_diff_eq!(u.pairing(mu).unwrap(), 1.0 * d, epsilon = 1e-12);
        assert!(PotentialField::zeros(2, 3).pairing(mu).is_err());
    }

    #[test]
    fn lipschitz_examples() {
        let cloud = PointCloud::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 2.0, 0.0], vec![-1.0, 0.5, 2.0]]).unwrap();
        let proj =
            PotentialField::from_rows(&cloud.rows().iter().map(|p| p[..2].to_vec()).collect::<Vec<_>>()).unwrap();
        let est = proj.lipschitz_constant(&cloud).unwrap();
        assert!(est.constant <= 1.0 + 1e-15);
        let constant = PotentialField::from_rows(&[vec![2.0], vec![2.0], vec![2.0]]).unwrap();
        assert_eq!(constant.lipschitz_constant(&cloud).unwrap().constant, 0.0);
        assert_eq!(constant.lipschitz_constant(&cloud).unwrap().pair, Some((0, 1)));

        let two = PointCloud::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let u = PotentialField::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(u.lipschitz_constant(&two).unwrap().constant, 1.5);

        let single = PointCloud::from_rows(&[vec![0.0]]).unwrap();
        let est = PotentialField::from_rows(&[vec![5.0]]).unwrap().lipschitz_constant(&single).unwrap();
        assert_eq!(est, LipschitzEstimate { constant: 0.0, pair: None });
    }

    #[test]
    fn lipschitz_reports_first_maximising_pair() {
        let cloud = PointCloud::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let u = PotentialField::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        for exec in [Exec::Sequential, Exec::Parallel] {
            let est = u.lipschitz_constant_with(&cloud, exec).unwrap();
            assert_eq!(est.constant, 1.0);
            assert_eq!(est.pair, Some((0, 1)));
        }
    }

    #[test]
    fn instance_json_roundtrip() {
        let inst = two_point();
        let text = inst.to_json().unwrap();
        let back = Instance::from_json(&text).unwrap();
        assert_eq!(back.to_json().unwrap(), text);
        assert!(Instance::from_json(r#"{"n":2,"m":1,"points":[[0,0],[1]],"weights":[[1],[-1]]}"#).is_err());
    }
}
