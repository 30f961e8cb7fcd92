//! The counterexample family to mass balance for vector measures, the
//! mass-balance report on transport sets, and a discrete surrogate for
//! absolute continuity of the first marginal of `‖π‖`.
//!
//! The atomic instance puts `vᵢ` at `xᵢ` for `i = 1..m+1`. Its optimal
//! coupling sends every `vᵢ` straight to `x_{m+1}`, and the optimal potential
//! is an isometry on each pair `(xᵢ, x_{m+1})` only, so `x_{m+1}` is shared by
//! `m` leaves and no transport set through it can carry zero mass.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::certifier::{certify, OptimalityCertificate};
use crate::error::{Error, Result};
use crate::leaves::{self, maximal_transport_sets, LeafDecomposition};
use crate::linalg::{dot, norm, rank, sub};
use crate::measure::{Instance, PotentialField, VectorCoupling, VectorMeasure};
use crate::par::Exec;
use crate::solver::{solve, SolveReport, SolverParams};

pub const DEFAULT_BALANCE_TOLERANCE: f64 = 1e-6;
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleSpec {
    pub n: usize,
    pub m: usize,
    /// `x₁..x_{m+1}` in `R^n`; the last one is the hub.
    pub anchors: Vec<Vec<f64>>,
    /// `v₁..v_{m+1}` in `R^m`, summing to zero.
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// `x = (1,0), (0,1), (0,0)`, `v = (1,0), (1,2), (−2,−2)`, zero-padded to
    /// `R^n`. Needs `m = 2`.
    Reference,
    /// `xᵢ = eᵢ − 1/m` on the first `m` axes with the hub at the origin, and
    /// `vᵢ = eᵢ`, `v_{m+1} = −Σvᵢ`. Any `m ≤ n`.
    Simplex,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" | "paper" => Ok(Preset::Reference),
            "simplex" => Ok(Preset::Simplex),
            other => Err(Error::InvalidSpec(format!("unknown preset {other:?}"))),
        }
    }
}

impl CounterexampleSpec {
    pub fn preset(preset: Preset, n: usize, m: usize) -> Result<Self> {
        if m == 0 || m > n {
            return Err(Error::InvalidSpec(format!("need 1 ≤ m ≤ n, got n = {n}, m = {m}")));
        }
        let pad = |x: &[f64]| {
            let mut v = x.to_vec();
            v.resize(n, 0.0);
            v
        };
        match preset {
            Preset::Reference => {
                if m != 2 {
                    return Err(Error::InvalidSpec("the reference preset has m = 2".into()));
                }
                Ok(CounterexampleSpec {
                    n,
                    m,
                    anchors: vec![pad(&[1.0, 0.0]), pad(&[0.0, 1.0]), pad(&[0.0, 0.0])],
                    vectors: vec![vec![1.0, 0.0], vec![1.0, 2.0], vec![-2.0, -2.0]],
                })
            }
            Preset::Simplex => {
                let mut anchors = Vec::new();
                let mut vectors = Vec::new();
                for i in 0..m {
                    let mut x = vec![0.0; n];
                    x[i] = 1.0;
                    if m > 1 {
                        x[..m].iter_mut().for_each(|c| *c -= 1.0 / m as f64);
                    }
                    anchors.push(x);
                    let mut v = vec![0.0; m];
                    v[i] = 1.0;
                    vectors.push(v);
                }
                anchors.push(vec![0.0; n]);
                vectors.push(vec![-1.0; m]);
                Ok(CounterexampleSpec { n, m, anchors, vectors })
            }
        }
    }

    /// The atomic instance `Σ vᵢ δ_{xᵢ}`.
    pub fn instance(&self) -> Result<Instance> {
        check_shape(self)?;
        Instance::build(&self.anchors, &self.vectors)
    }

    fn hub(&self) -> &[f64] {
        &self.anchors[self.m]
    }
}

fn check_shape(spec: &CounterexampleSpec) -> Result<()> {
    let (n, m) = (spec.n, spec.m);
    if m == 0 || m > n {
        return Err(Error::InvalidSpec(format!("need 1 ≤ m ≤ n, got n = {n}, m = {m}")));
    }
    if spec.anchors.len() != m + 1 || spec.vectors.len() != m + 1 {
        return Err(Error::DimensionMismatch(format!(
            "need {} anchors and vectors, got {} and {}",
            m + 1,
            spec.anchors.len(),
            spec.vectors.len()
        )));
    }
    if spec.anchors.iter().any(|x| x.len() != n) || spec.vectors.iter().any(|v| v.len() != m) {
        return Err(Error::DimensionMismatch("anchor or vector of the wrong length".into()));
    }
    if spec.anchors.iter().chain(&spec.vectors).flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("counterexample specification"));
    }
    Ok(())
}

/// Strictness margin
/// `min_{i≠j≤m} ⟨vᵢ/‖vᵢ‖, vⱼ/‖vⱼ‖⟩ − ⟨x̂ᵢ, x̂ⱼ⟩` with `x̂ᵢ` the unit vector from
/// the hub to `xᵢ`. Positive means valid. Infinite when `m = 1` (no pairs).
pub fn check_counterexample_spec(spec: &CounterexampleSpec) -> Result<f64> {
    check_shape(spec)?;
    let m = spec.m;
    if let Some(i) = spec.vectors.iter().position(|v| norm(v) == 0.0) {
        return Err(Error::ZeroVector(i));
    }
    let mut sum = vec![0.0; m];
    spec.vectors.iter().for_each(|v| sum.iter_mut().zip(v).for_each(|(s, x)| *s += x));
    let scale: f64 = spec.vectors.iter().map(|v| norm(v)).sum();
    if norm(&sum) > 1e-12 * scale {
        return Err(Error::InvalidSpec(format!("vectors sum to {sum:?}, not zero")));
    }
    // with Σvᵢ = 0 the kernel contains (1,…,1); it is exactly that line iff
    // the vectors have rank m
    let mat = DMatrix::from_fn(m, m + 1, |r, c| spec.vectors[c][r]);
    let r = rank(mat.singular_values().as_slice(), RANK_TOLERANCE);
    if r < m {
        return Err(Error::RankDeficiency { rank: r, needed: m });
    }
    let hub = spec.hub();
    let mut dirs = Vec::with_capacity(m);
    for (i, x) in spec.anchors[..m].iter().enumerate() {
        let d = sub(x, hub);
        let len = norm(&d);
        if len == 0.0 {
            return Err(Error::InvalidSpec(format!("anchor {i} coincides with the hub")));
        }
        dirs.push(d.iter().map(|c| c / len).collect::<Vec<_>>());
    }
    for i in 0..=m {
        for j in 0..i {
            if spec.anchors[i] == spec.anchors[j] {
                return Err(Error::InvalidSpec(format!("anchors {j} and {i} coincide")));
            }
        }
    }
    let unit: Vec<Vec<f64>> = spec.vectors.iter().map(|v| v.iter().map(|c| c / norm(v)).collect()).collect();
    let mut margin = f64::INFINITY;
    for i in 0..m {
        for j in 0..i {
            margin = margin.min(dot(&unit[i], &unit[j]) - dot(&dirs[i], &dirs[j]));
        }
    }
    Ok(margin)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticOptimum {
    pub potential: PotentialField,
    pub coupling: VectorCoupling,
    /// `Σᵢ₌₁..m ‖vᵢ‖‖xᵢ − x_{m+1}‖`.
    pub value: f64,
}

/// `u(x_{m+1}) = 0`, `u(xᵢ) = ‖xᵢ − x_{m+1}‖ vᵢ/‖vᵢ‖`, and the coupling moving
/// each `vᵢ` from `xᵢ` to the hub.
pub fn analytic_optimum(spec: &CounterexampleSpec) -> Result<AnalyticOptimum> {
    let margin = check_counterexample_spec(spec)?;
    if !(margin > 0.0) {
        return Err(Error::InvalidSpec(format!("strictness margin {margin} is not positive")));
    }
    let m = spec.m;
    let hub = spec.hub();
    let mut values = Vec::with_capacity((m + 1) * m);
    let mut entries = Vec::with_capacity(m);
    let mut value = 0.0;
    for i in 0..m {
        let d = norm(&sub(&spec.anchors[i], hub));
        let v = &spec.vectors[i];
        let nv = norm(v);
        values.extend(v.iter().map(|c| d * c / nv));
        entries.push((i, m, v.clone()));
        value += nv * d;
    }
    values.extend(std::iter::repeat_n(0.0, m));
    Ok(AnalyticOptimum {
        potential: PotentialField::new(m, values)?,
        coupling: VectorCoupling::from_entries(m, &entries)?,
        value,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BalanceVerdict {
    BalanceHolds,
    BalanceFails,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportSetMass {
    pub id: usize,
    pub members: Vec<usize>,
    /// `μ(A)` with every shared atom counted in full.
    pub plain_mass: Vec<f64>,
    /// `μ(A)` under the split of shared atoms that is closest to balance.
    pub mass: Vec<f64>,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomSplit {
    pub point: usize,
    /// `(transport set id, fraction)`; fractions are nonnegative and sum to 1.
    pub fractions: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassBalanceReport {
    pub sets: Vec<TransportSetMass>,
    pub splits: Vec<AtomSplit>,
    /// Absolute threshold `tol · Σ‖μᵢ‖`.
    pub threshold: f64,
    pub verdict: BalanceVerdict,
    /// Members of the first set whose mass exceeds the threshold.
    pub witness: Option<Vec<usize>>,
}

/// Primal active-set solver for `min ‖Ax − b‖` subject to `x ≥ 0` and
/// `Σ_{k ∈ g} x_k = 1` for every group `g`. Groups partition the columns.
fn split_qp(a: &DMatrix<f64>, b: &DVector<f64>, groups: &[Vec<usize>]) -> DVector<f64> {
    let n = a.ncols();
    let q = groups.len();
    let hessian = a.transpose() * a;
    let linear = a.transpose() * b;
    let mut group_of = vec![0; n];
    for (g, members) in groups.iter().enumerate() {
        members.iter().for_each(|&k| group_of[k] = g);
    }
    // feasible start: each group puts its whole weight on its first column
    let mut x = DVector::zeros(n);
    let mut free = vec![false; n];
    for members in groups {
        x[members[0]] = 1.0;
        free[members[0]] = true;
    }
    let tol = 1e-12 * (1.0 + hessian.abs().max() + linear.abs().max());
    for _ in 0..10 * (n + 1) {
        // equality-constrained minimiser over the free columns
        let cols: Vec<usize> = (0..n).filter(|&k| free[k]).collect();
        let p = cols.len();
        let mut kkt = DMatrix::zeros(p + q, p + q);
        let mut rhs = DVector::zeros(p + q);
        for (r, &k) in cols.iter().enumerate() {
            for (c, &l) in cols.iter().enumerate() {
                kkt[(r, c)] = hessian[(k, l)];
            }
            rhs[r] = linear[k];
            kkt[(r, p + group_of[k])] = 1.0;
            kkt[(p + group_of[k], r)] = 1.0;
        }
        for g in 0..q {
            rhs[p + g] = 1.0;
        }
        let Ok(sol) = kkt.svd(true, true).solve(&rhs, 1e-14) else {
            break;
        };
        let mut target = DVector::zeros(n);
        for (r, &k) in cols.iter().enumerate() {
            target[k] = sol[r];
        }
        let step = &target - &x;
        if step.amax() > tol {
            // walk towards the minimiser, stopping at the first bound
            let mut alpha = 1.0;
            let mut blocking = None;
            for &k in &cols {
                if step[k] < 0.0 {
                    let t = x[k] / -step[k];
                    if t < alpha {
                        alpha = t;
                        blocking = Some(k);
                    }
                }
            }
            x += step * alpha;
            if let Some(k) = blocking {
                x[k] = 0.0;
                free[k] = false;
            }
            continue;
        }
        x = target;
        // multipliers of the bound constraints
        let grad = &hessian * &x - &linear;
        let mut lambda = vec![0.0; q];
        let mut counts = vec![0usize; q];
        for &k in &cols {
            lambda[group_of[k]] -= grad[k];
            counts[group_of[k]] += 1;
        }
        lambda.iter_mut().zip(&counts).for_each(|(l, &c)| *l /= c.max(1) as f64);
        let release = (0..n)
            .filter(|&k| !free[k])
            .map(|k| (k, grad[k] + lambda[group_of[k]]))
            .filter(|&(_, nu)| nu < -tol)
            .min_by(|p, q| p.1.total_cmp(&q.1));
        match release {
            Some((k, _)) => free[k] = true,
            None => break,
        }
    }
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// `μ(A)` for every maximal transport set `A` of `decomposition`.
///
/// A point shared by several maximal sets lies on the boundary of leaves; in
/// the continuum such points carry no mass, so on a sample their mass is
/// split among the sets containing it. The split is chosen to bring all set
/// masses as close to zero as possible (least squares over the product of
/// simplices, one simplex per shared atom). Balance holds when every
/// split mass is within `tol · Σ‖μᵢ‖` of zero, so `BalanceFails` means that no
/// split balances the sets.
pub fn mass_balance_report(
    instance: &Instance,
    decomposition: &LeafDecomposition,
    tol: f64,
) -> Result<MassBalanceReport> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidParameter("tolerance must be nonnegative".into()));
    }
    let n = instance.len();
    if decomposition.assignment.len() != n {
        return Err(Error::DimensionMismatch("decomposition does not match the instance".into()));
    }
    let mu = instance.measure();
    let m = mu.target_dim();
    let scale = mu.total_variation();
    let sets = maximal_transport_sets(decomposition);

    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (s, set) in sets.iter().enumerate() {
        set.iter().for_each(|&i| owners[i].push(s));
    }
    let shared: Vec<usize> = (0..n).filter(|&i| owners[i].len() >= 2).collect();
    // one variable per (shared atom, owning set)
    let vars: Vec<(usize, usize)> = shared.iter().flat_map(|&i| owners[i].iter().map(move |&s| (i, s))).collect();

    let normalise = if scale > 0.0 { 1.0 / scale } else { 1.0 };
    let mut fixed = vec![vec![0.0; m]; sets.len()];
    for (s, set) in sets.iter().enumerate() {
        for &i in set.iter().filter(|&&i| owners[i].len() < 2) {
            fixed[s].iter_mut().zip(mu.weight(i)).for_each(|(f, w)| *f += w * normalise);
        }
    }
    let mut fractions = vec![0.0; vars.len()];
    if !vars.is_empty() {
        let rows = sets.len() * m;
        let mut a = DMatrix::zeros(rows, vars.len());
        let mut b = DVector::zeros(rows);
        for (k, &(i, s)) in vars.iter().enumerate() {
            for c in 0..m {
                a[(s * m + c, k)] = mu.weight(i)[c] * normalise;
            }
        }
        for s in 0..sets.len() {
            for c in 0..m {
                b[s * m + c] = -fixed[s][c];
            }
        }
        let groups: Vec<Vec<usize>> =
            shared.iter().map(|&i| (0..vars.len()).filter(|&k| vars[k].0 == i).collect()).collect();
        let x = split_qp(&a, &b, &groups);
        // renormalise so each atom is split exactly
        for &i in &shared {
            let ks: Vec<usize> = (0..vars.len()).filter(|&k| vars[k].0 == i).collect();
            let total: f64 = ks.iter().map(|&k| x[k]).sum();
            for &k in &ks {
                fractions[k] = if total > 0.0 { x[k] / total } else { 1.0 / ks.len() as f64 };
            }
        }
    }

    let threshold = tol * scale;
    let mut out = Vec::with_capacity(sets.len());
    for (s, set) in sets.iter().enumerate() {
        let plain_mass = mu.mass_of(set);
        let mut mass = vec![0.0; m];
        for &i in set {
            let f = if owners[i].len() < 2 {
                1.0
            } else {
                let k = vars.iter().position(|&v| v == (i, s)).expect("variable");
                fractions[k]
            };
            mass.iter_mut().zip(mu.weight(i)).for_each(|(a, w)| *a += f * w);
        }
        let nm = norm(&mass);
        out.push(TransportSetMass { id: s, members: set.clone(), plain_mass, mass, norm: nm });
    }
    let splits = shared
        .iter()
        .map(|&i| AtomSplit {
            point: i,
            fractions: vars.iter().zip(&fractions).filter(|((p, _), _)| *p == i).map(|(&(_, s), &f)| (s, f)).collect(),
        })
        .collect();
    let witness = out.iter().find(|t| t.norm > threshold).map(|t| t.members.clone());
    Ok(MassBalanceReport {
        sets: out,
        splits,
        threshold,
        verdict: if witness.is_some() { BalanceVerdict::BalanceFails } else { BalanceVerdict::BalanceHolds },
        witness,
    })
}

/// Discrete stand-in for `P₁‖π‖ ≪ ‖μ‖`: every point carrying more than
/// `tol · tv(π)` of the first marginal of `‖π‖` (in the orientation stored in
/// the coupling) must carry nonzero mass.
pub fn marginal_abs_continuity_surrogate(pi: &VectorCoupling, mu: &VectorMeasure, tol: f64) -> Result<bool> {
    let marginal = pi.first_marginal_of_variation(mu.len())?;
    let threshold = tol * pi.total_variation();
    Ok(marginal.iter().enumerate().all(|(i, &p)| p <= threshold || norm(mu.weight(i)) > 0.0))
}

/// Replaces each atom `vᵢ δ_{xᵢ}` by `points_per_ball` Halton points in the
/// ball `B(xᵢ, ε)`, each carrying `vᵢ / points_per_ball`. One point per ball
/// keeps the atoms.
pub fn smoothed_instance(spec: &CounterexampleSpec, epsilon: f64, points_per_ball: usize) -> Result<Instance> {
    check_shape(spec)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) || points_per_ball == 0 {
        return Err(Error::InvalidParameter("need ε > 0 and at least one point per ball".into()));
    }
    let k = spec.anchors.len();
    let mut closest = (f64::INFINITY, (0, 1));
    for i in 0..k {
        for j in i + 1..k {
            let d = norm(&sub(&spec.anchors[i], &spec.anchors[j]));
            if d < closest.0 {
                closest = (d, (i, j));
            }
        }
    }
    if epsilon >= closest.0 / 2.0 {
        return Err(Error::BallOverlap { pair: closest.1, radius: epsilon });
    }
    let offsets = ball_points(spec.n, points_per_ball);
    let mut points = Vec::with_capacity(k * points_per_ball);
    let mut weights = Vec::with_capacity(k * points_per_ball);
    for (x, v) in spec.anchors.iter().zip(&spec.vectors) {
        let w: Vec<f64> = v.iter().map(|c| c / points_per_ball as f64).collect();
        for o in &offsets {
            points.push(x.iter().zip(o).map(|(a, b)| a + epsilon * b).collect());
            weights.push(w.clone());
        }
    }
    Instance::build(&points, &weights)
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base) as f64 * inv;
        i /= base;
        inv /= base as f64;
    }
    out
}

/// The first `count` points of the Halton sequence in `[−1, 1]^n` that fall
/// in the open unit ball, starting with the centre.
fn ball_points(n: usize, count: usize) -> Vec<Vec<f64>> {
    let mut primes = Vec::with_capacity(n);
    let mut p = 2u64;
    while primes.len() < n {
        if (2..p).take_while(|d| d * d <= p).all(|d| !p.is_multiple_of(d)) {
            primes.push(p);
        }
        p += 1;
    }
    let mut out = vec![vec![0.0; n]];
    let mut index = 1u64;
    while out.len() < count {
        let x: Vec<f64> = primes.iter().map(|&b| 2.0 * radical_inverse(index, b) - 1.0).collect();
        index += 1;
        if norm(&x) < 1.0 && x.iter().any(|&c| c != 0.0) {
            out.push(x);
        }
    }
    out
}

/// Everything about one counterexample specification in one place.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub spec: CounterexampleSpec,
    #[serde(with = "crate::float_serde")]
    pub margin: f64,
    pub analytic: AnalyticOptimum,
    pub analytic_certificate: OptimalityCertificate,
    pub solver_coupling: VectorCoupling,
    pub solver_potential: PotentialField,
    pub solver_report: SolveReport,
    pub solver_certificate: OptimalityCertificate,
    pub decomposition: LeafDecomposition,
    pub mass_balance: MassBalanceReport,
    pub surrogate: bool,
}

/// Analytic and numerical optimum of the atomic instance, certificates for
/// both, and the mass-balance report for the leaves of the analytic potential.
pub fn run_counterexample(spec: &CounterexampleSpec, params: &SolverParams, tol: f64) -> Result<CounterexampleReport> {
    let margin = check_counterexample_spec(spec)?;
    let analytic = analytic_optimum(spec)?;
    let instance = spec.instance()?;
    let analytic_certificate = certify(&analytic.coupling, &analytic.potential, &instance, tol)?;
    let (solver_coupling, solver_potential, solver_report) = solve(&instance, params)?;
    let solver_certificate = certify(&solver_coupling, &solver_potential, &instance, tol)?;
    let decomposition =
        leaves::decompose(instance.cloud(), &analytic.potential, leaves::DEFAULT_EPSILON, Exec::Sequential)?;
    let mass_balance = mass_balance_report(&instance, &decomposition, DEFAULT_BALANCE_TOLERANCE)?;
    let surrogate = marginal_abs_continuity_surrogate(&analytic.coupling, instance.measure(), tol)?;
    Ok(CounterexampleReport {
        spec: spec.clone(),
        margin,
        analytic,
        analytic_certificate,
        solver_coupling,
        solver_potential,
        solver_report,
        solver_certificate,
        decomposition,
        mass_balance,
        surrogate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certifier::Verdict;
    use approx::assert_relative_eq;

    fn reference() -> CounterexampleSpec {
        CounterexampleSpec::preset(Preset::Reference, 2, 2).unwrap()
    }

    #[test]
    fn reference_margin() {
        assert_relative_eq!(check_counterexample_spec(&reference()).unwrap(), 1.0 / 5f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn orthogonal_vectors_have_zero_margin() {
        let mut spec = reference();
        spec.vectors = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]];
        assert_eq!(check_counterexample_spec(&spec).unwrap(), 0.0);
        assert!(matches!(analytic_optimum(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn collinear_vectors_are_rank_deficient() {
        let mut spec = reference();
        spec.vectors = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![-3.0, 0.0]];
        assert!(matches!(check_counterexample_spec(&spec), Err(Error::RankDeficiency { rank: 1, needed: 2 })));
        spec.vectors = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert!(matches!(check_counterexample_spec(&spec), Err(Error::ZeroVector(0))));
    }

    #[test]
    fn analytic_optimum_certifies() {
        for spec in [
            reference(),
            CounterexampleSpec::preset(Preset::Reference, 4, 2).unwrap(),
            CounterexampleSpec::preset(Preset::Simplex, 3, 3).unwrap(),
            CounterexampleSpec::preset(Preset::Simplex, 5, 4).unwrap(),
        ] {
            let opt = analytic_optimum(&spec).unwrap();
            let inst = spec.instance().unwrap();
            let cert = certify(&opt.coupling, &opt.potential, &inst, 1e-12).unwrap();
            assert_eq!(cert.verdict, Verdict::Optimal, "{spec:?}");
            assert!(cert.gap.abs() <= 1e-9);
            assert!(opt.potential.lipschitz_constant(inst.cloud()).unwrap().constant <= 1.0 + 1e-12);
            // isometric on spokes, strictly contracting between anchors
            let m = spec.m;
            for i in 0..m {
                assert_relative_eq!(opt.potential.gap(i, m), inst.distance(i, m), epsilon = 1e-12);
                for j in 0..i {
                    assert!(opt.potential.gap(i, j) < inst.distance(i, j) - 1e-6);
                }
            }
        }
        assert_relative_eq!(analytic_optimum(&reference()).unwrap().value, 1.0 + 5f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn one_dimensional_spec() {
        let spec = CounterexampleSpec {
            n: 1,
            m: 1,
            anchors: vec![vec![2.5], vec![0.0]],
            vectors: vec![vec![-3.0], vec![3.0]],
        };
        assert_eq!(check_counterexample_spec(&spec).unwrap(), f64::INFINITY);
        assert_relative_eq!(analytic_optimum(&spec).unwrap().value, 7.5);
    }

    #[test]
    fn reference_balance_fails_at_hub_sets() {
        let report = run_counterexample(&reference(), &SolverParams::default(), 1e-9).unwrap();
        assert_eq!(report.mass_balance.verdict, BalanceVerdict::BalanceFails);
        assert_eq!(report.mass_balance.witness, Some(vec![0, 2]));
        assert_eq!(report.mass_balance.sets[0].plain_mass, vec![-1.0, -2.0]);
        // the best split of the hub is 1/4 : 3/4, leaving ±(1/2, −1/2)
        let split = &report.mass_balance.splits[0];
        assert_eq!(split.point, 2);
        assert_relative_eq!(split.fractions[0].1, 0.25, epsilon = 1e-9);
        assert_relative_eq!(report.mass_balance.sets[0].norm, 0.5f64.sqrt(), epsilon = 1e-9);
        assert!(report.surrogate);
        assert_eq!(report.solver_certificate.verdict, Verdict::Optimal);
    }

    #[test]
    fn scalar_line_balance_holds() {
        let inst = Instance::build(&[vec![0.0], vec![1.0], vec![2.0]], &[vec![1.0], vec![-2.0], vec![1.0]]).unwrap();
        let u = PotentialField::from_rows(&[vec![0.0], vec![-1.0], vec![0.0]]).unwrap();
        let d = leaves::decompose(inst.cloud(), &u, 1e-9, Exec::Sequential).unwrap();
        let report = mass_balance_report(&inst, &d, 1e-9).unwrap();
        assert_eq!(report.verdict, BalanceVerdict::BalanceHolds);
        assert_eq!(report.sets.len(), 2);
        assert_relative_eq!(report.splits[0].fractions[0].1, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn single_set_is_balanced() {
        let inst = Instance::build(&[vec![0.0], vec![1.0], vec![3.0]], &[vec![2.0], vec![-1.0], vec![-1.0]]).unwrap();
        let u = PotentialField::from_rows(&[vec![0.0], vec![-1.0], vec![-3.0]]).unwrap();
        let d = leaves::decompose(inst.cloud(), &u, 1e-9, Exec::Sequential).unwrap();
        let report = mass_balance_report(&inst, &d, 1e-12).unwrap();
        assert_eq!(report.sets.len(), 1);
        assert_eq!(report.verdict, BalanceVerdict::BalanceHolds);
        assert!(report.sets[0].norm == 0.0);
    }

    #[test]
    fn surrogate_examples() {
        let mu = VectorMeasure::from_rows(&[vec![1.0], vec![0.0], vec![-1.0]]).unwrap();
        let direct = VectorCoupling::from_entries(1, &[(0, 2, vec![1.0])]).unwrap();
        assert!(marginal_abs_continuity_surrogate(&direct, &mu, 1e-9).unwrap());
        let steiner = VectorCoupling::from_entries(1, &[(0, 1, vec![1.0]), (1, 2, vec![1.0])]).unwrap();
        assert!(!marginal_abs_continuity_surrogate(&steiner, &mu, 1e-9).unwrap());
    }

    #[test]
    fn smoothing() {
        let spec = reference();
        let atomic = smoothed_instance(&spec, 0.1, 1).unwrap();
        assert_eq!(atomic.cloud().rows(), spec.anchors);
        let inst = smoothed_instance(&spec, 0.2, 7).unwrap();
        assert_eq!(inst.len(), 21);
        assert!(norm(&inst.measure().total_mass()) <= 1e-15);
        for i in 0..21 {
            assert!(norm(&sub(inst.cloud().point(i), &spec.anchors[i / 7])) < 0.2);
        }
        assert!(matches!(smoothed_instance(&spec, 0.5, 3), Err(Error::BallOverlap { pair: (0, 2), .. })));
    }

    #[test]
    fn halton_ball_points_are_distinct() {
        let pts = ball_points(3, 40);
        assert_eq!(pts.len(), 40);
        for i in 0..40 {
            assert!(norm(&pts[i]) < 1.0);
            for j in 0..i {
                assert!(pts[i] != pts[j]);
            }
        }
    }
}
