//! Leaf decompositions of a 1-Lipschitz potential on a finite sample.
//!
//! A leaf is a maximal set on which `u` is an isometry. On a sample the
//! relation `‖u(xᵢ) − u(xⱼ)‖ ≥ (1 − ε)‖xᵢ − xⱼ‖` is collected into an
//! [`IsometryGraph`]; a leaf is then a maximal clique of that graph on which
//! an affine isometry fits to within `ε` times the clique's diameter. Leaves
//! are closed sets, so two of them may share boundary points; such points are
//! flagged and assigned to the leaf with the smaller id.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dist, dot, norm, op_norm, rank, sub};
use crate::measure::{PointCloud, PotentialField};
use crate::par::{self, Exec};

pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Singular values below this fraction of the largest count as zero when
/// estimating leaf dimensions.
pub const RANK_TOLERANCE: f64 = 1e-7;
/// Absolute slack added to the derivative-modulus comparison.
pub const FIT_TOLERANCE: f64 = 1e-9;
/// Work budget (subsets × members) for the exact convex-hull σ estimate.
const SIGMA_BUDGET: f64 = 5e7;

/// Pairs of sample points on which the potential saturates the distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsometryGraph {
    pub len: usize,
    pub epsilon: f64,
    /// Sorted pairs `(i, j)` with `i < j`.
    pub edges: Vec<(usize, usize)>,
}

impl IsometryGraph {
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.len];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj.iter_mut().for_each(|a| a.sort_unstable());
        adj
    }

    fn matrix(&self) -> Vec<bool> {
        let mut a = vec![false; self.len * self.len];
        for &(i, j) in &self.edges {
            a[i * self.len + j] = true;
            a[j * self.len + i] = true;
        }
        a
    }
}

fn check_potential(cloud: &PointCloud, u: &PotentialField) -> Result<()> {
    if u.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!("potential has {} values for {} points", u.len(), cloud.len())));
    }
    Ok(())
}

/// Exact pairwise scan for saturated pairs.
pub fn isometry_graph(cloud: &PointCloud, u: &PotentialField, epsilon: f64, exec: Exec) -> Result<IsometryGraph> {
    check_potential(cloud, u)?;
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidParameter("epsilon must lie in [0, 1)".into()));
    }
    let lip = u.lipschitz_constant_with(cloud, exec)?;
    if lip.constant > 1.0 + epsilon {
        return Err(Error::NotLipschitz { constant: lip.constant });
    }
    let n = cloud.len();
    let rows = par::map_range(exec, n, |i| {
        (i + 1..n).filter(|&j| u.gap(i, j) >= (1.0 - epsilon) * cloud.distance(i, j)).collect::<Vec<_>>()
    });
    let edges = rows.into_iter().enumerate().flat_map(|(i, js)| js.into_iter().map(move |j| (i, j))).collect();
    Ok(IsometryGraph { len: n, epsilon, edges })
}

/// `u(y) ≈ T(P(y − y₀)) + b` with `T` isometric on the fitted tangent space.
/// `T` is stored through the images of an orthonormal basis of that space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineIsometry {
    pub base_point: Vec<f64>,
    pub offset: Vec<f64>,
    /// Orthonormal basis of the tangent space, as vectors in `R^n`.
    pub basis: Vec<Vec<f64>>,
    /// `T` applied to each basis vector, in `R^m`.
    pub images: Vec<Vec<f64>>,
    /// RMS misfit over the fitted points.
    pub residual: f64,
}

impl AffineIsometry {
    pub fn dimension(&self) -> usize {
        self.basis.len()
    }

    /// Coordinates of `P(x − y₀)` in the tangent basis.
    pub fn coordinates(&self, x: &[f64]) -> Vec<f64> {
        let d = sub(x, &self.base_point);
        self.basis.iter().map(|e| dot(e, &d)).collect()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.offset.clone();
        for (c, img) in self.coordinates(x).iter().zip(&self.images) {
            out.iter_mut().zip(img).for_each(|(o, t)| *o += c * t);
        }
        out
    }

    /// Orthogonal projection onto the tangent space, `n × n`.
    pub fn projection(&self) -> DMatrix<f64> {
        let n = self.base_point.len();
        DMatrix::from_fn(n, n, |r, c| self.basis.iter().map(|e| e[r] * e[c]).sum())
    }

    /// `TP` as an `m × n` matrix; the derivative of `u` along the leaf.
    pub fn derivative(&self) -> DMatrix<f64> {
        let (m, n) = (self.offset.len(), self.base_point.len());
        DMatrix::from_fn(m, n, |r, c| self.basis.iter().zip(&self.images).map(|(e, t)| t[r] * e[c]).sum())
    }

    fn misfits(&self, points: &[&[f64]], values: &[&[f64]]) -> Vec<f64> {
        points.iter().zip(values).map(|(x, v)| dist(&self.apply(x), v)).collect()
    }
}

/// Least-squares affine map with `T` orthogonal on the span of the centred
/// points (orthogonal Procrustes). When the span has more dimensions than the
/// target no isometry exists, and the returned `T` is the best co-isometry.
pub fn affine_isometry_fit(points: &[Vec<f64>], values: &[Vec<f64>]) -> Result<AffineIsometry> {
    let p: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let v: Vec<&[f64]> = values.iter().map(Vec::as_slice).collect();
    fit(&p, &v)
}

fn centroid(rows: &[&[f64]]) -> Vec<f64> {
    let mut c = vec![0.0; rows[0].len()];
    for r in rows {
        c.iter_mut().zip(*r).for_each(|(a, b)| *a += b);
    }
    let k = rows.len() as f64;
    c.iter_mut().for_each(|a| *a /= k);
    c
}

fn fit(points: &[&[f64]], values: &[&[f64]]) -> Result<AffineIsometry> {
    if points.is_empty() {
        return Err(Error::Empty);
    }
    if points.len() != values.len() {
        return Err(Error::DimensionMismatch(format!("{} points, {} values", points.len(), values.len())));
    }
    let (n, m) = (points[0].len(), values[0].len());
    if points.iter().any(|x| x.len() != n) || values.iter().any(|y| y.len() != m) {
        return Err(Error::DimensionMismatch("ragged input".into()));
    }
    let k = points.len();
    let base_point = centroid(points);
    let offset = centroid(values);
    let x = DMatrix::from_fn(k, n, |i, c| points[i][c] - base_point[c]);
    let y = DMatrix::from_fn(k, m, |i, c| values[i][c] - offset[c]);

    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let sv = svd.singular_values.as_slice();
    let r = rank(sv, RANK_TOLERANCE);
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let basis: Vec<Vec<f64>> = order[..r].iter().map(|&i| v_t.row(i).iter().copied().collect()).collect();

    let images = if r == 0 {
        Vec::new()
    } else {
        let e = DMatrix::from_fn(n, r, |row, c| basis[c][row]);
        let coords = &x * &e;
        let cross = y.transpose() * coords;
        let svd = cross.svd(true, true);
        let t = svd.u.expect("requested") * svd.v_t.expect("requested");
        (0..r).map(|c| t.column(c).iter().copied().collect()).collect()
    };
    let mut out = AffineIsometry { base_point, offset, basis, images, residual: 0.0 };
    let misfits = out.misfits(points, values);
    out.residual = (misfits.iter().map(|e| e * e).sum::<f64>() / k as f64).sqrt();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub id: usize,
    /// Sorted point indices, including points shared with other leaves.
    pub members: Vec<usize>,
    pub dimension: usize,
    pub isometry: AffineIsometry,
    /// Distance of each member to the relative boundary of the convex hull of
    /// the members, aligned with `members`. An estimate of `dist(x, ∂S)`.
    pub sigma: Vec<f64>,
}

impl Leaf {
    pub fn fit_residual(&self) -> f64 {
        self.isometry.residual
    }

    pub fn position(&self, point: usize) -> Option<usize> {
        self.members.binary_search(&point).ok()
    }

    pub fn is_trivial(&self) -> bool {
        self.members.len() < 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafDecomposition {
    pub epsilon: f64,
    pub leaves: Vec<Leaf>,
    /// Leaf id of every point: the smallest id among the leaves containing it.
    pub assignment: Vec<usize>,
    /// Points lying in two or more leaves, sorted.
    pub boundary_flags: Vec<usize>,
}

impl LeafDecomposition {
    /// Ids of the leaves containing each point.
    pub fn memberships(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.assignment.len()];
        for leaf in &self.leaves {
            for &i in &leaf.members {
                out[i].push(leaf.id);
            }
        }
        out
    }

    pub fn is_boundary(&self, point: usize) -> bool {
        self.boundary_flags.binary_search(&point).is_ok()
    }

    /// The potential obtained by evaluating each point's assigned leaf map.
    pub fn reconstruct(&self, cloud: &PointCloud) -> Result<PotentialField> {
        if cloud.len() != self.assignment.len() {
            return Err(Error::DimensionMismatch("cloud does not match the decomposition".into()));
        }
        let m = self.leaves.first().map_or(0, |l| l.isometry.offset.len());
        let values =
            (0..cloud.len()).flat_map(|i| self.leaves[self.assignment[i]].isometry.apply(cloud.point(i))).collect();
        PotentialField::new(m, values)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Bron–Kerbosch with pivoting over the vertices of `candidates`.
fn maximal_cliques(adj: &[bool], n: usize, candidates: Vec<usize>) -> Vec<Vec<usize>> {
    fn expand(adj: &[bool], n: usize, r: &mut Vec<usize>, p: Vec<usize>, mut x: Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if p.is_empty() {
            if x.is_empty() {
                let mut c = r.clone();
                c.sort_unstable();
                out.push(c);
            }
            return;
        }
        let pivot = p
            .iter()
            .chain(&x)
            .copied()
            .max_by_key(|&u| (p.iter().filter(|&&v| adj[u * n + v]).count(), std::cmp::Reverse(u)))
            .expect("nonempty");
        let mut p = p;
        let branch: Vec<usize> = p.iter().copied().filter(|&v| !adj[pivot * n + v]).collect();
        for v in branch {
            let np = p.iter().copied().filter(|&w| adj[v * n + w]).collect();
            let nx = x.iter().copied().filter(|&w| adj[v * n + w]).collect();
            r.push(v);
            expand(adj, n, r, np, nx, out);
            r.pop();
            p.retain(|&w| w != v);
            x.push(v);
        }
    }
    let mut out = Vec::new();
    expand(adj, n, &mut Vec::new(), candidates, Vec::new(), &mut out);
    out.sort();
    out
}

/// Validates a clique by fitting an isometry; on failure the worst-fitting
/// member (smallest index on ties) is dropped until the fit passes. Dropped
/// members are themselves pairwise saturated and are tried again as a group.
fn validate(cloud: &PointCloud, u: &PotentialField, epsilon: f64, set: Vec<usize>, out: &mut Vec<Vec<usize>>) {
    let start = out.len();
    let dropped = shrink(cloud, u, epsilon, set.clone(), &[], out);
    // every pair in the clique is isometric on its own, so each pair must end
    // up inside some validated set
    for &r in &dropped {
        for &j in &set {
            let covered = out[start..].iter().any(|s| s.contains(&r) && s.contains(&j));
            if j != r && !covered {
                shrink(cloud, u, epsilon, set.clone(), &[r, j], out);
            }
        }
    }
}

/// Removes worst-fitting members (never one of `anchors`) until the rest is an
/// isometric set, which is pushed to `out`. Returns the removed members.
fn shrink(
    cloud: &PointCloud,
    u: &PotentialField,
    epsilon: f64,
    mut keep: Vec<usize>,
    anchors: &[usize],
    out: &mut Vec<Vec<usize>>,
) -> Vec<usize> {
    let m = u.target_dim();
    let mut dropped = Vec::new();
    while keep.len() >= 2 {
        let pts: Vec<&[f64]> = keep.iter().map(|&i| cloud.point(i)).collect();
        let vals: Vec<&[f64]> = keep.iter().map(|&i| u.value(i)).collect();
        let f = fit(&pts, &vals).expect("consistent input");
        let diameter = keep
            .iter()
            .flat_map(|&i| keep.iter().map(move |&j| (i, j)))
            .map(|(i, j)| cloud.distance(i, j))
            .fold(0.0, f64::max);
        if f.residual <= epsilon * diameter && f.dimension() <= m {
            out.push(keep);
            break;
        }
        let misfits = f.misfits(&pts, &vals);
        let Some(worst) = (0..keep.len())
            .filter(|&a| !anchors.contains(&keep[a]))
            .max_by(|&a, &b| misfits[a].total_cmp(&misfits[b]).then(b.cmp(&a)))
        else {
            break;
        };
        dropped.push(keep.remove(worst));
    }
    dropped
}

fn binomial(k: usize, d: usize) -> f64 {
    (0..d).fold(1.0, |acc, i| acc * (k - i) as f64 / (i + 1) as f64)
}

/// Distance of each point to the boundary of the convex hull of `coords`
/// (full-dimensional in `R^d`), from the supporting hyperplanes through
/// `d`-subsets. Returns `None` if that enumeration is too expensive.
fn hull_depths(coords: &[Vec<f64>], d: usize) -> Option<Vec<f64>> {
    let k = coords.len();
    if d == 0 {
        return Some(vec![0.0; k]);
    }
    if d == 1 {
        let lo = coords.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
        let hi = coords.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max);
        return Some(coords.iter().map(|c| (c[0] - lo).min(hi - c[0]).max(0.0)).collect());
    }
    if binomial(k, d) * k as f64 > SIGMA_BUDGET {
        return None;
    }
    let scale = coords.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs())).max(1.0);
    let tol = 1e-9 * scale;
    let mut depth = vec![f64::INFINITY; k];
    let mut subset: Vec<usize> = (0..d).collect();
    loop {
        let p0 = &coords[subset[0]];
        let mut a = DMatrix::zeros(d, d);
        for (r, &s) in subset[1..].iter().enumerate() {
            for c in 0..d {
                a[(r, c)] = coords[s][c] - p0[c];
            }
        }
        let svd = a.svd(false, true);
        let sv = svd.singular_values.as_slice();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&x, &y| sv[x].total_cmp(&sv[y]));
        // the d − 1 differences must span a hyperplane
        if sv[order[1]] > tol {
            let v_t = svd.v_t.expect("requested");
            let normal: Vec<f64> = v_t.row(order[0]).iter().copied().collect();
            let h = dot(&normal, p0);
            let side: Vec<f64> = coords.iter().map(|c| dot(&normal, c) - h).collect();
            let below = side.iter().all(|&s| s <= tol);
            let above = side.iter().all(|&s| s >= -tol);
            if below || above {
                let sign = if below { -1.0 } else { 1.0 };
                for (dp, s) in depth.iter_mut().zip(&side) {
                    *dp = dp.min((sign * s).max(0.0));
                }
            }
        }
        // next d-subset in lexicographic order
        let mut i = d;
        loop {
            if i == 0 {
                return Some(depth.into_iter().map(|x| if x <= tol { 0.0 } else { x }).collect());
            }
            i -= 1;
            if subset[i] < k - d + i {
                break;
            }
        }
        subset[i] += 1;
        for j in i + 1..d {
            subset[j] = subset[j - 1] + 1;
        }
    }
}

fn sigma_estimates(cloud: &PointCloud, members: &[usize], isometry: &AffineIsometry) -> Vec<f64> {
    let coords: Vec<Vec<f64>> = members.iter().map(|&i| isometry.coordinates(cloud.point(i))).collect();
    if let Some(depths) = hull_depths(&coords, isometry.dimension()) {
        return depths;
    }
    // proxy: nearest non-member sample point lying in the leaf's affine hull;
    // zero (the vacuous value) when there is none
    let scale = members.iter().map(|&i| norm(cloud.point(i))).fold(1.0, f64::max);
    let outside: Vec<usize> = (0..cloud.len())
        .filter(|i| members.binary_search(i).is_err())
        .filter(|&i| {
            let x = cloud.point(i);
            let c = isometry.coordinates(x);
            let mut back = isometry.base_point.clone();
            for (ci, e) in c.iter().zip(&isometry.basis) {
                back.iter_mut().zip(e).for_each(|(b, ev)| *b += ci * ev);
            }
            dist(&back, x) <= 1e-9 * scale
        })
        .collect();
    members
        .iter()
        .map(|&i| outside.iter().map(|&j| cloud.distance(i, j)).fold(f64::INFINITY, f64::min))
        .map(|s| if s.is_finite() { s } else { 0.0 })
        .collect()
}

/// Candidate leaves are the maximal cliques of `graph` (a connected component
/// that is already a clique is taken whole), each validated by
/// [`affine_isometry_fit`]. Points in no validated leaf become singleton
/// leaves of dimension 0.
pub fn extract_leaves(
    cloud: &PointCloud,
    u: &PotentialField,
    graph: &IsometryGraph,
    exec: Exec,
) -> Result<LeafDecomposition> {
    check_potential(cloud, u)?;
    if graph.len != cloud.len() {
        return Err(Error::DimensionMismatch("graph does not match the cloud".into()));
    }
    let n = cloud.len();
    let adj = graph.matrix();
    let neighbours = graph.neighbours();

    let mut seen = vec![false; n];
    let mut candidates = Vec::new();
    for start in 0..n {
        if seen[start] || neighbours[start].is_empty() {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut head = 0;
        while head < comp.len() {
            for &j in &neighbours[comp[head]] {
                if !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                }
            }
            head += 1;
        }
        comp.sort_unstable();
        let clique = comp.iter().all(|&i| neighbours[i].len() == comp.len() - 1);
        if clique {
            candidates.push(comp);
        } else {
            candidates.extend(maximal_cliques(&adj, n, comp));
        }
    }

    let validated = par::map_range(exec, candidates.len(), |c| {
        let mut out = Vec::new();
        validate(cloud, u, graph.epsilon, candidates[c].clone(), &mut out);
        out
    });
    let mut sets: Vec<Vec<usize>> = validated.into_iter().flatten().collect();
    sets.sort();
    sets.dedup();
    let contained = |a: &Vec<usize>, b: &Vec<usize>| a.len() < b.len() && a.iter().all(|i| b.binary_search(i).is_ok());
    let maximal: Vec<Vec<usize>> = sets.iter().filter(|a| !sets.iter().any(|b| contained(a, b))).cloned().collect();
    let mut covered = vec![false; n];
    maximal.iter().flatten().for_each(|&i| covered[i] = true);
    let mut sets = maximal;
    sets.extend((0..n).filter(|&i| !covered[i]).map(|i| vec![i]));
    sets.sort();

    let leaves = par::map_range(exec, sets.len(), |id| {
        let members = sets[id].clone();
        let pts: Vec<&[f64]> = members.iter().map(|&i| cloud.point(i)).collect();
        let vals: Vec<&[f64]> = members.iter().map(|&i| u.value(i)).collect();
        let isometry = fit(&pts, &vals).expect("consistent input");
        let sigma = sigma_estimates(cloud, &members, &isometry);
        Leaf { id, dimension: isometry.dimension(), members, isometry, sigma }
    });

    let mut assignment = vec![usize::MAX; n];
    let mut count = vec![0usize; n];
    for leaf in &leaves {
        for &i in &leaf.members {
            count[i] += 1;
            assignment[i] = assignment[i].min(leaf.id);
        }
    }
    let boundary_flags = (0..n).filter(|&i| count[i] >= 2).collect();
    Ok(LeafDecomposition { epsilon: graph.epsilon, leaves, assignment, boundary_flags })
}

/// Isometry graph and leaves in one call.
pub fn decompose(cloud: &PointCloud, u: &PotentialField, epsilon: f64, exec: Exec) -> Result<LeafDecomposition> {
    let graph = isometry_graph(cloud, u, epsilon, exec)?;
    extract_leaves(cloud, u, &graph, exec)
}

struct PairData<'a> {
    l1: &'a Leaf,
    l2: &'a Leaf,
    sigma: (f64, f64),
    /// `‖Δx‖² − ‖Δu‖²`.
    slack: f64,
}

fn pair_data<'a>(
    decomposition: &'a LeafDecomposition,
    cloud: &PointCloud,
    u: &PotentialField,
    leaves: (usize, usize),
    points: (usize, usize),
) -> Result<PairData<'a>> {
    check_potential(cloud, u)?;
    let get =
        |l: usize| decomposition.leaves.get(l).ok_or_else(|| Error::InvalidParameter(format!("no leaf with id {l}")));
    let (l1, l2) = (get(leaves.0)?, get(leaves.1)?);
    let sigma_of = |leaf: &Leaf, x: usize| {
        leaf.position(x)
            .map(|p| leaf.sigma[p])
            .ok_or_else(|| Error::InvalidParameter(format!("point {x} is not in leaf {}", leaf.id)))
    };
    let sigma = (sigma_of(l1, points.0)?, sigma_of(l2, points.1)?);
    let dx = cloud.distance(points.0, points.1);
    let du = u.gap(points.0, points.1);
    Ok(PairData { l1, l2, sigma, slack: dx * dx - du * du })
}

/// `‖x₁ − x₂‖² − ‖u(x₁) − u(x₂)‖² − 2σ₁σ₂‖P₁P₂ − P₁T₁*T₂P₂‖` for `x₁` in leaf
/// `leaves.0` and `x₂` in leaf `leaves.1`. Nonnegative for a genuine leaf
/// structure up to fit noise. When a σ vanishes the operator term drops out
/// and this is the plain Lipschitz slack.
pub fn strengthened_lipschitz_residual(
    decomposition: &LeafDecomposition,
    cloud: &PointCloud,
    u: &PotentialField,
    leaves: (usize, usize),
    points: (usize, usize),
) -> Result<f64> {
    let d = pair_data(decomposition, cloud, u, leaves, points)?;
    let (a1, a2) = (d.l1.isometry.derivative(), d.l2.isometry.derivative());
    let op = d.l1.isometry.projection() * d.l2.isometry.projection() - a1.transpose() * a2;
    Ok(d.slack - 2.0 * d.sigma.0 * d.sigma.1 * op_norm(&op))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    /// `‖T₁P₁ − T₂P₂‖`.
    pub modulus: f64,
    /// `sqrt((‖Δx‖² − ‖Δu‖²)/(σ₁σ₂))`, infinite when a σ vanishes.
    #[serde(with = "crate::float_serde")]
    pub bound: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares the jump of the leaf derivatives `Du = TP` between two
/// `m`-dimensional leaves with the bound implied by the strengthened
/// Lipschitz inequality.
pub fn derivative_modulus_check(
    decomposition: &LeafDecomposition,
    cloud: &PointCloud,
    u: &PotentialField,
    leaves: (usize, usize),
    points: (usize, usize),
) -> Result<DerivativeCheck> {
    let d = pair_data(decomposition, cloud, u, leaves, points)?;
    let m = u.target_dim();
    for leaf in [d.l1, d.l2] {
        if leaf.dimension < m {
            return Err(Error::WrongDimension(format!("leaf {} has dimension {} < m = {m}", leaf.id, leaf.dimension)));
        }
    }
    let modulus = op_norm(&(d.l1.isometry.derivative() - d.l2.isometry.derivative()));
    let product = d.sigma.0 * d.sigma.1;
    let bound = if product > 0.0 { (d.slack.max(0.0) / product).sqrt() } else { f64::INFINITY };
    let relative = |leaf: &Leaf, s: f64| if s > 0.0 { leaf.fit_residual() / s } else { 0.0 };
    let tolerance = FIT_TOLERANCE + relative(d.l1, d.sigma.0) + relative(d.l2, d.sigma.1);
    Ok(DerivativeCheck { modulus, bound, tolerance, pass: modulus <= bound + tolerance })
}

/// Smallest set containing `seeds` that is closed under: a member that is not
/// boundary-flagged pulls in every point sharing a leaf with it. Sorted.
pub fn transport_set(decomposition: &LeafDecomposition, seeds: &[usize]) -> Result<Vec<usize>> {
    transport_set_with(decomposition, &decomposition.memberships(), seeds)
}

fn transport_set_with(
    decomposition: &LeafDecomposition,
    memberships: &[Vec<usize>],
    seeds: &[usize],
) -> Result<Vec<usize>> {
    let n = decomposition.assignment.len();
    if let Some(&bad) = seeds.iter().find(|&&s| s >= n) {
        return Err(Error::InvalidParameter(format!("seed {bad} out of range")));
    }
    let mut inside = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    for &s in seeds {
        if !inside[s] {
            inside[s] = true;
            stack.push(s);
        }
    }
    while let Some(x) = stack.pop() {
        if decomposition.is_boundary(x) {
            continue;
        }
        for &l in &memberships[x] {
            for &y in &decomposition.leaves[l].members {
                if !inside[y] {
                    inside[y] = true;
                    stack.push(y);
                }
            }
        }
    }
    Ok((0..n).filter(|&i| inside[i]).collect())
}

/// Closures of whole leaves that are not strictly contained in another
/// closure, ordered by smallest member.
///
/// Seeding with leaves rather than single points matters on a sample: a leaf
/// whose sampled members are all shared endpoints still has interior points
/// in the continuum, but no single-point seed would ever expand into it. The
/// closure of any point is contained in the closure of its leaves, so these
/// are also the maximal closures of single points.
pub fn maximal_transport_sets(decomposition: &LeafDecomposition) -> Vec<Vec<usize>> {
    let memberships = decomposition.memberships();
    let mut sets: Vec<Vec<usize>> = decomposition
        .leaves
        .iter()
        .map(|leaf| transport_set_with(decomposition, &memberships, &leaf.members).expect("seed in range"))
        .collect();
    sets.sort();
    sets.dedup();
    let contained = |a: &Vec<usize>, b: &Vec<usize>| a.len() < b.len() && a.iter().all(|i| b.binary_search(i).is_ok());
    sets.iter().filter(|a| !sets.iter().any(|b| contained(a, b))).cloned().collect()
}

/// Synthetic two-leaf sample: `u(x) = ‖x‖` on `per_ray` points of each of the
/// rays at angles 0 and `angle`, with radii evenly spaced in `radii`. The
/// leaves are the two segments (dimension 1 = m), `Du = x̂ᵀ` on each, and the
/// operator term of the strengthened inequality is `1 − cos(angle)`.
pub fn two_ray_sample(angle: f64, radii: (f64, f64), per_ray: usize) -> Result<(PointCloud, PotentialField)> {
    if !(angle > 0.0 && angle < std::f64::consts::PI) {
        return Err(Error::InvalidParameter("angle must lie in (0, π)".into()));
    }
    if !(radii.0 > 0.0 && radii.1 > radii.0) || per_ray < 2 {
        return Err(Error::InvalidParameter("need 0 < r₀ < r₁ and at least two points per ray".into()));
    }
    let mut points = Vec::new();
    let mut values = Vec::new();
    for dir in [(1.0, 0.0), (angle.cos(), angle.sin())] {
        for k in 0..per_ray {
            let r = radii.0 + (radii.1 - radii.0) * k as f64 / (per_ray - 1) as f64;
            points.push(vec![r * dir.0, r * dir.1]);
            values.push(vec![r]);
        }
    }
    Ok((PointCloud::from_rows(&points)?, PotentialField::from_rows(&values)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(k: usize) -> PointCloud {
        let mut rows = Vec::new();
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    rows.push(vec![a as f64, b as f64, c as f64]);
                }
            }
        }
        PointCloud::from_rows(&rows).unwrap()
    }

    fn projection(cloud: &PointCloud, m: usize, scale: f64) -> PotentialField {
        let rows: Vec<Vec<f64>> = cloud.rows().iter().map(|x| x[..m].iter().map(|v| v * scale).collect()).collect();
        PotentialField::from_rows(&rows).unwrap()
    }

    fn counterexample() -> (PointCloud, PotentialField) {
        let cloud = PointCloud::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let s = 5f64.sqrt();
        let u = PotentialField::from_rows(&[vec![1.0, 0.0], vec![1.0 / s, 2.0 / s], vec![0.0, 0.0]]).unwrap();
        (cloud, u)
    }

    #[test]
    fn graph_of_projection_joins_fibres_only() {
        let cloud = grid(3);
        let u = projection(&cloud, 2, 1.0);
        let g = isometry_graph(&cloud, &u, 1e-9, Exec::Sequential).unwrap();
        assert!(!g.edges.is_empty());
        for i in 0..cloud.len() {
            for j in i + 1..cloud.len() {
                let same = cloud.point(i)[2] == cloud.point(j)[2];
                assert_eq!(g.edges.binary_search(&(i, j)).is_ok(), same);
            }
        }
        let half = projection(&cloud, 2, 0.5);
        assert!(isometry_graph(&cloud, &half, 1e-9, Exec::Sequential).unwrap().edges.is_empty());
        let double = projection(&cloud, 2, 2.0);
        assert!(matches!(isometry_graph(&cloud, &double, 1e-9, Exec::Sequential), Err(Error::NotLipschitz { .. })));
    }

    #[test]
    fn counterexample_graph_and_leaves() {
        let (cloud, u) = counterexample();
        let g = isometry_graph(&cloud, &u, 1e-9, Exec::Sequential).unwrap();
        assert_eq!(g.edges, vec![(0, 2), (1, 2)]);
        let d = extract_leaves(&cloud, &u, &g, Exec::Sequential).unwrap();
        let members: Vec<_> = d.leaves.iter().map(|l| l.members.clone()).collect();
        assert_eq!(members, vec![vec![0, 2], vec![1, 2]]);
        assert_eq!(d.boundary_flags, vec![2]);
        assert_eq!(d.assignment, vec![0, 1, 0]);
        assert!(d.leaves.iter().all(|l| l.dimension == 1));
        assert_eq!(transport_set(&d, &[0]).unwrap(), vec![0, 2]);
        assert_eq!(transport_set(&d, &[2]).unwrap(), vec![2]);
        assert_eq!(maximal_transport_sets(&d), vec![vec![0, 2], vec![1, 2]]);
    }

    #[test]
    fn grid_projection_leaves() {
        let cloud = grid(3);
        let u = projection(&cloud, 2, 1.0);
        let d = decompose(&cloud, &u, 1e-9, Exec::Sequential).unwrap();
        assert_eq!(d.leaves.len(), 3);
        for leaf in &d.leaves {
            assert_eq!(leaf.dimension, 2);
            assert_eq!(leaf.members.len(), 9);
            assert!(leaf.fit_residual() < 1e-12);
            // only the centre of each 3×3 fibre is interior
            let interior: Vec<_> = leaf.members.iter().zip(&leaf.sigma).filter(|(_, &s)| s > 0.0).collect();
            assert_eq!(interior.len(), 1);
            assert_relative_eq!(*interior[0].1, 1.0, epsilon = 1e-12);
        }
        assert!(d.boundary_flags.is_empty());
        let seed = d.leaves[1].members[4];
        assert_eq!(transport_set(&d, &[seed]).unwrap(), d.leaves[1].members);
    }

    #[test]
    fn zero_potential_gives_singletons() {
        let cloud = grid(2);
        let d = decompose(&cloud, &PotentialField::zeros(8, 2), 1e-9, Exec::Sequential).unwrap();
        assert_eq!(d.leaves.len(), 8);
        assert!(d.leaves.iter().all(|l| l.dimension == 0 && l.members.len() == 1));
        assert_eq!(d.assignment, (0..8).collect::<Vec<_>>());
        assert_eq!(transport_set(&d, &[3]).unwrap(), vec![3]);
    }

    #[test]
    fn procrustes_examples() {
        let f = affine_isometry_fit(
            &[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![0.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
        )
        .unwrap();
        assert_eq!(f.dimension(), 2);
        assert!(f.residual < 1e-14);
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!((f.derivative() - rot).abs().max() < 1e-14);

        let single = affine_isometry_fit(&[vec![1.0, 2.0]], &[vec![3.0]]).unwrap();
        assert_eq!(single.dimension(), 0);
        assert_eq!(single.residual, 0.0);
        assert_eq!(single.apply(&[5.0, 5.0]), vec![3.0]);

        let stretched =
            affine_isometry_fit(&[vec![0.0, 0.0], vec![1.0, 0.0]], &[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert!(stretched.residual > 0.1);
    }

    #[test]
    fn overlapping_component_is_split() {
        // u folds the line at 1: |t − 1| is isometric on [0, 1] and on [1, 2]
        let cloud = PointCloud::from_rows(&[vec![0.0], vec![0.5], vec![1.0], vec![1.5], vec![2.0]]).unwrap();
        let u = PotentialField::from_rows(&[vec![1.0], vec![0.5], vec![0.0], vec![0.5], vec![1.0]]).unwrap();
        let d = decompose(&cloud, &u, 1e-9, Exec::Sequential).unwrap();
        let members: Vec<_> = d.leaves.iter().map(|l| l.members.clone()).collect();
        assert_eq!(members, vec![vec![0, 1, 2], vec![2, 3, 4]]);
        assert_eq!(d.boundary_flags, vec![2]);
        assert_eq!(d.leaves[0].sigma, vec![0.0, 0.5, 0.0]);
    }

    #[test]
    fn parallel_fibres_strengthened_residual() {
        let cloud = grid(3);
        let u = projection(&cloud, 2, 1.0);
        let d = decompose(&cloud, &u, 1e-9, Exec::Sequential).unwrap();
        let (a, b) = (d.leaves[0].members[4], d.leaves[2].members[4]);
        let r = strengthened_lipschitz_residual(&d, &cloud, &u, (0, 2), (a, b)).unwrap();
        let dx = cloud.distance(a, b);
        let du = u.gap(a, b);
        assert_relative_eq!(r, dx * dx - du * du, epsilon = 1e-12);
        let same =
            strengthened_lipschitz_residual(&d, &cloud, &u, (1, 1), (d.leaves[1].members[4], d.leaves[1].members[0]))
                .unwrap();
        assert!(same.abs() < 1e-12);
        let check = derivative_modulus_check(&d, &cloud, &u, (0, 2), (a, b)).unwrap();
        assert!(check.pass && check.modulus < 1e-12);
    }

    #[test]
    fn low_dimensional_leaf_rejected_by_modulus_check() {
        let (cloud, u) = counterexample();
        let d = decompose(&cloud, &u, 1e-9, Exec::Sequential).unwrap();
        assert!(matches!(derivative_modulus_check(&d, &cloud, &u, (0, 1), (0, 1)), Err(Error::WrongDimension(_))));
        assert!(matches!(
            strengthened_lipschitz_residual(&d, &cloud, &u, (0, 1), (1, 1)),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn reconstruction_is_idempotent() {
        let cloud = grid(3);
        let u = projection(&cloud, 2, 1.0);
        let d = decompose(&cloud, &u, 1e-9, Exec::Sequential).unwrap();
        let back = d.reconstruct(&cloud).unwrap();
        assert!(back.as_slice().iter().zip(u.as_slice()).all(|(a, b)| (a - b).abs() < 1e-12));
        let again = decompose(&cloud, &back, 1e-9, Exec::Sequential).unwrap();
        assert_eq!(again.assignment, d.assignment);
    }

    #[test]
    fn cliques() {
        // square with one diagonal: cliques {0,1,2} and {0,2,3}
        let n = 4;
        let mut adj = vec![false; 16];
        for (i, j) in [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)] {
            adj[i * n + j] = true;
            adj[j * n + i] = true;
        }
        assert_eq!(maximal_cliques(&adj, n, vec![0, 1, 2, 3]), vec![vec![0, 1, 2], vec![0, 2, 3]]);
    }

    #[test]
    fn hull_depth_of_square() {
        let coords = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![2.0, 2.0], vec![1.0, 0.5]];
        let d = hull_depths(&coords, 2).unwrap();
        assert_eq!(d[..4], [0.0; 4]);
        assert_relative_eq!(d[4], 0.5, epsilon = 1e-12);
        let tet = vec![
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.1, 0.1, 0.1],
        ];
        assert_relative_eq!(hull_depths(&tet, 3).unwrap()[4], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn two_rays_satisfy_strengthened_bounds() {
        let (cloud, u) = two_ray_sample(0.7, (1.0, 3.0), 5).unwrap();
        let d = decompose(&cloud, &u, 1e-9, Exec::Sequential).unwrap();
        let members: Vec<_> = d.leaves.iter().map(|l| l.members.clone()).collect();
        assert_eq!(members, vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]);
        assert_eq!(d.leaves[0].sigma, vec![0.0, 0.5, 1.0, 0.5, 0.0]);
        for a in 0..5 {
            for b in 5..10 {
                let r = strengthened_lipschitz_residual(&d, &cloud, &u, (0, 1), (a, b)).unwrap();
                // closed form: 2 r₁ r₂ (1 − cos θ) − 2 σ₁ σ₂ (1 − cos θ)
                let (r1, r2) = (norm(cloud.point(a)), norm(cloud.point(b)));
                let (s1, s2) = (d.leaves[0].sigma[a], d.leaves[1].sigma[b - 5]);
                assert_relative_eq!(r, 2.0 * (r1 * r2 - s1 * s2) * (1.0 - 0.7f64.cos()), epsilon = 1e-12);
                assert!(r >= 0.0);
                let check = derivative_modulus_check(&d, &cloud, &u, (0, 1), (a, b)).unwrap();
                assert!(check.pass, "{check:?}");
                assert_relative_eq!(check.modulus, (2.0 - 2.0 * 0.7f64.cos()).sqrt(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn modulus_bound_constant_is_tight() {
        // on whole rays from the origin σ = r, and the bound holds with
        // equality; halving the denominator's constant would break it
        let (r, theta) = (2.0f64, 1.1f64);
        let slack = 2.0 * r * r * (1.0 - theta.cos());
        let modulus = (2.0 - 2.0 * theta.cos()).sqrt();
        assert_relative_eq!(modulus, (slack / (r * r)).sqrt(), epsilon = 1e-14);
        assert!(modulus > (slack / (2.0 * r * r)).sqrt() + 0.1);
    }
}
