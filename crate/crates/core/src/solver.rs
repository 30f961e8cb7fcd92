//! Primal-dual solver for the vector Kantorovich–Rubinstein problem
//!
//! ```text
//!     minimise  Σₑ dₑ ‖πₑ‖   subject to  Bπ = μ
//! ```
//!
//! on an edge set of the point cloud, where `B` is the signed incidence
//! operator acting block-wise on `R^m` flows. The scheme is over-relaxed ADMM
//! on the splitting `π = z` with a projection step onto `{Bπ = μ}` and a block
//! soft-threshold step for the sum of norms. The dual potential is recovered
//! from the scaled multiplier `ρw`, which converges to `Bᵀu`.
//!
//! Every reported pair is feasible: the coupling is the projection of the
//! sparse iterate `z` onto `{Bπ = μ}` and the potential is rescaled so that its
//! Lipschitz constant over the edge set is at most one. The gap is therefore a
//! true optimality bound.

use serde::{Deserialize, Serialize};

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::measure::{DistanceMatrix, Instance, PotentialField, VectorCoupling};
use crate::par::{self, Exec};

/// Which point pairs may carry flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgePolicy {
    Complete,
    /// Each point is joined to its `k` nearest neighbours (symmetrised).
    /// Restricting the edge set can only raise the optimal cost, so the value
    /// is an upper bound on the true norm.
    Knn(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverParams {
    pub max_iters: usize,
    /// Initial ADMM penalty ρ, adapted by residual balancing.
    pub penalty: f64,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub tol_gap: f64,
    /// Over-relaxation factor in (0, 2).
    pub relaxation: f64,
    pub edge_policy: EdgePolicy,
    pub exec: Exec,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            max_iters: 20_000,
            penalty: 1.0,
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            tol_gap: 1e-6,
            relaxation: 1.6,
            edge_policy: EdgePolicy::Complete,
            exec: Exec::default(),
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("penalty", self.penalty),
            ("tol_primal", self.tol_primal),
            ("tol_dual", self.tol_dual),
            ("tol_gap", self.tol_gap),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive and finite")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be positive".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::InvalidParameter("relaxation must lie in (0, 2)".into()));
        }
        if self.edge_policy == EdgePolicy::Knn(0) {
            return Err(Error::InvalidParameter("knn needs k >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    IterLimit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Cost of the returned coupling.
    pub primal_value: f64,
    /// Pairing of the returned potential with μ.
    pub dual_value: f64,
    pub gap: f64,
    pub iterations: usize,
    /// `‖net(π) − μ‖` of the returned coupling.
    pub primal_residual: f64,
    /// `max(0, Lip(u) − 1)` of the returned potential over the edge set.
    pub dual_residual: f64,
    /// Final relative ADMM residuals `(‖π − z‖, ρ‖Δz‖)`.
    #[serde(with = "crate::float_serde::pair")]
    pub admm_residuals: (f64, f64),
    pub penalty: f64,
    pub edges: usize,
    pub status: SolveStatus,
    pub notes: Vec<String>,
}

/// Edge list with per-node incidence, sorted so that every reduction runs in
/// a fixed order.
struct Graph {
    n: usize,
    ends: Vec<(usize, usize)>,
    /// For node `i`: edges incident to `i` with sign +1 (tail) or −1 (head).
    incidence: Vec<Vec<(usize, f64)>>,
    /// Every pair is an edge, so `L + 11ᵀ = N·I`.
    complete: bool,
    /// Edges were chosen by a knn rule rather than exact redundancy pruning.
    restricted: bool,
}

impl Graph {
    fn build(instance: &Instance, policy: EdgePolicy, exec: Exec) -> Result<Self> {
        let n = instance.len();
        let mut restricted = false;
        let ends: Vec<(usize, usize)> = match policy {
            EdgePolicy::Knn(k) if k < n.saturating_sub(1) => {
                restricted = true;
                let mut set = std::collections::BTreeSet::new();
                for i in 0..n {
                    let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                    others
                        .sort_by(|&a, &b| instance.distance(i, a).total_cmp(&instance.distance(i, b)).then(a.cmp(&b)));
                    for &j in &others[..k] {
                        set.insert((i.min(j), i.max(j)));
                    }
                }
                set.into_iter().collect()
            }
            _ => pruned_pairs(instance, exec),
        };
        let complete = ends.len() == n * n.saturating_sub(1) / 2;
        let mut incidence = vec![Vec::new(); n];
        for (e, &(i, j)) in ends.iter().enumerate() {
            incidence[i].push((e, 1.0));
            incidence[j].push((e, -1.0));
        }
        let graph = Graph { n, ends, incidence, complete, restricted };
        let components = graph.components();
        if components > 1 {
            return Err(Error::DisconnectedEdgeSet { components });
        }
        Ok(graph)
    }

    fn components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut count = self.n;
        for &(i, j) in &self.ends {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
                count -= 1;
            }
        }
        count
    }
}

/// All pairs `(i, k)` except those with a point `j` strictly between them in
/// the metric sense, `d(i, j) + d(j, k) ≤ (1 + PRUNE_TOL)·d(i, k)`. Flow on such
/// a pair can be rerouted through `j` at no extra cost, so dropping it changes
/// the optimal value by at most a factor `1 + PRUNE_TOL`; it removes the
/// degenerate ties between direct and relayed transport (every triple on a
/// line is one) that slow down first-order methods.
fn pruned_pairs(instance: &Instance, exec: Exec) -> Vec<(usize, usize)> {
    let n = instance.len();
    let rows = par::map_range(exec, n, |i| {
        (i + 1..n)
            .filter(|&k| {
                let dik = instance.distance(i, k) * (1.0 + PRUNE_TOL);
                !(0..n).any(|j| j != i && j != k && instance.distance(i, j) + instance.distance(j, k) <= dik)
            })
            .map(|k| (i, k))
            .collect::<Vec<_>>()
    });
    rows.concat()
}

/// Solves `(L + 11ᵀ) y = r` column-wise, where `L` is a (weighted) graph
/// Laplacian.
enum LaplaceSolver {
    /// Complete graph: `L + 11ᵀ = N·I`.
    Scaled(f64),
    Dense(Cholesky<f64, Dyn>),
}

impl LaplaceSolver {
    fn new(graph: &Graph) -> Result<Self> {
        if graph.complete {
            return Ok(LaplaceSolver::Scaled(graph.n as f64));
        }
        Self::weighted(graph, None)
    }

    /// `B C Bᵀ + 11ᵀ` with edge conductances `c` (all ones if `None`).
    fn weighted(graph: &Graph, conductance: Option<&[f64]>) -> Result<Self> {
        let n = graph.n;
        let mut a = DMatrix::from_element(n, n, 1.0);
        for (e, &(i, j)) in graph.ends.iter().enumerate() {
            let c = conductance.map_or(1.0, |c| c[e]);
            a[(i, i)] += c;
            a[(j, j)] += c;
            a[(i, j)] -= c;
            a[(j, i)] -= c;
        }
        Cholesky::new(a)
            .map(LaplaceSolver::Dense)
            .ok_or_else(|| Error::NumericalBreakdown("graph Laplacian is not positive definite".into()))
    }

    /// `r` is row-major `N × m`; solved in place.
    fn solve(&self, r: &mut [f64], m: usize) {
        match self {
            LaplaceSolver::Scaled(n) => r.iter_mut().for_each(|x| *x /= n),
            LaplaceSolver::Dense(chol) => {
                let n = r.len() / m;
                let mut rhs = DMatrix::from_row_slice(n, m, r);
                chol.solve_mut(&mut rhs);
                for i in 0..n {
                    for c in 0..m {
                        r[i * m + c] = rhs[(i, c)];
                    }
                }
            }
        }
    }
}

const PRUNE_TOL: f64 = 1e-12;
/// Convergence also asks for edge-wise complementary slackness at
/// `SLACK_FACTOR·tol_gap`, i.e. a pair that certifies at that tolerance.
const SLACK_FACTOR: f64 = 10.0;
const EDGES_PER_CHUNK: usize = 512;
const BALANCE_EVERY: usize = 10;
const MAX_BALANCE_INTERVAL: usize = 500;
const GAP_CHECK_EVERY: usize = 50;
/// Normalised feasibility a polished flow must reach to be used.
const POLISH_FEASIBILITY: f64 = 1e-12;
/// Largest KKT system the Newton polish will factor.
const NEWTON_MAX_DIM: usize = 600;
const MAX_NEWTON_INTERVAL: usize = 2000;
const NEWTON_ITERS: usize = 12;
const NEWTON_REGULARISATION: f64 = 1e-12;
const NEWTON_DECREMENT: f64 = 1e-15;
const PENALTY_RANGE: (f64, f64) = (1e-10, 1e10);

/// Normalised problem data and ADMM state.
///
/// Flows live in one interleaved buffer with `3m` entries per edge:
/// `[π | z | w]`, so each edge is updated from a single contiguous block.
struct Admm<'a> {
    graph: &'a Graph,
    m: usize,
    exec: Exec,
    lap: LaplaceSolver,
    /// Normalised edge lengths `dₑ / D`.
    dist: Vec<f64>,
    /// Normalised measure `μ / S`, row-major `N × m`.
    mu: Vec<f64>,
    state: Vec<f64>,
    /// Relative edge penalties `ρₑ/ρ = dₑ/mean(d)`. With one penalty for all
    /// edges, short edges are shrunk far less than long ones and clustered
    /// point sets converge very slowly.
    weights: Vec<f64>,
    /// Solver for `B W⁻¹ Bᵀ + 11ᵀ`, used by the π-update.
    weighted_lap: LaplaceSolver,
    rho: f64,
    alpha: f64,
    slack_floor: f64,
    /// Distance matrix and its normaliser when the Lipschitz bound must hold on
    /// all pairs rather than on the edges only.
    all_pairs: Option<(&'a DistanceMatrix, f64)>,
}

#[derive(Default, Clone, Copy)]
struct Sums {
    r2: f64,
    s2: f64,
    pi2: f64,
    z2: f64,
    w2: f64,
}

impl Sums {
    fn add(self, o: Sums) -> Sums {
        Sums { r2: self.r2 + o.r2, s2: self.s2 + o.s2, pi2: self.pi2 + o.pi2, z2: self.z2 + o.z2, w2: self.w2 + o.w2 }
    }
}

/// A feasible primal-dual pair in normalised units.
struct Candidate {
    flows: Vec<f64>,
    potential: Vec<f64>,
    cost: f64,
    pairing: f64,
    feasibility: f64,
    lip: f64,
    slack: f64,
}

impl Candidate {
    fn gap(&self) -> f64 {
        self.cost - self.pairing
    }
}

impl<'a> Admm<'a> {
    fn block(&self) -> usize {
        3 * self.m
    }

    /// `out = B·x − μ` for `x` read from slot `slot` of the state (0 = π, 1 = z)
    /// or from a plain flow buffer.
    fn incidence_residual(&self, flows: FlowView<'_>) -> Vec<f64> {
        let m = self.m;
        let rows = par::map_range(self.exec, self.graph.n, |i| {
            let mut acc = vec![0.0; m];
            for &(e, sign) in &self.graph.incidence[i] {
                let f = flows.get(e, m);
                acc.iter_mut().zip(f).for_each(|(a, x)| *a += sign * x);
            }
            acc.iter_mut().zip(&self.mu[i * m..(i + 1) * m]).for_each(|(a, b)| *a -= b);
            acc
        });
        rows.concat()
    }

    fn step(&mut self, sums_needed: bool) -> Sums {
        let (m, b) = (self.m, self.block());
        // π ← z − w
        par::for_each_chunk_mut(self.exec, &mut self.state, b * EDGES_PER_CHUNK, |_, chunk| {
            for e in chunk.chunks_mut(b) {
                for c in 0..m {
                    e[c] = e[m + c] - e[2 * m + c];
                }
            }
        });
        // π ← π − W⁻¹Bᵀ (BW⁻¹Bᵀ + 11ᵀ)⁻¹ (Bπ − μ)
        let mut y = self.incidence_residual(FlowView::State(&self.state, 0));
        self.weighted_lap.solve(&mut y, m);
        let (alpha, rho) = (self.alpha, self.rho);
        let graph = self.graph;
        let dist = &self.dist;
        let weights = &self.weights;
        let partials = par::map_chunks_mut(self.exec, &mut self.state, b * EDGES_PER_CHUNK, |k, chunk| {
            let mut sums = Sums::default();
            let mut x = vec![0.0; m];
            for (local, e) in chunk.chunks_mut(b).enumerate() {
                let idx = k * EDGES_PER_CHUNK + local;
                let (i, j) = graph.ends[idx];
                let omega = weights[idx];
                for c in 0..m {
                    e[c] -= (y[i * m + c] - y[j * m + c]) / omega;
                }
                // over-relaxed point, then shrinkage of x + w
                for c in 0..m {
                    x[c] = alpha * e[c] + (1.0 - alpha) * e[m + c] + e[2 * m + c];
                }
                let nx = norm(&x);
                let t = dist[idx] / (rho * omega);
                let scale = if nx > t { 1.0 - t / nx } else { 0.0 };
                for c in 0..m {
                    let z_old = e[m + c];
                    let z_new = scale * x[c];
                    let w_new = x[c] - z_new;
                    if sums_needed {
                        let r = e[c] - z_new;
                        sums.r2 += omega * r * r;
                        sums.s2 += omega * omega * (z_new - z_old) * (z_new - z_old);
                        sums.pi2 += omega * e[c] * e[c];
                        sums.z2 += omega * z_new * z_new;
                        sums.w2 += omega * omega * w_new * w_new;
                    }
                    e[m + c] = z_new;
                    e[2 * m + c] = w_new;
                }
            }
            sums
        });
        partials.into_iter().fold(Sums::default(), Sums::add)
    }

    fn rescale_penalty(&mut self, factor: f64) {
        self.rho *= factor;
        let m = self.m;
        let b = self.block();
        par::for_each_chunk_mut(self.exec, &mut self.state, b * EDGES_PER_CHUNK, |_, chunk| {
            for e in chunk.chunks_mut(b) {
                e[2 * m..].iter_mut().for_each(|w| *w /= factor);
            }
        });
    }

    /// Feasible pair from the current iterate.
    fn candidate(&self) -> Candidate {
        let (m, b) = (self.m, self.block());
        // π* = z − Bᵀ (L + 11ᵀ)⁻¹ (Bz − μ)
        let mut y = self.incidence_residual(FlowView::State(&self.state, 1));
        self.lap.solve(&mut y, m);
        let state = &self.state;
        let graph = self.graph;
        let rows = par::map_range(self.exec, graph.ends.len(), |e| {
            let (i, j) = graph.ends[e];
            (0..m).map(|c| state[e * b + m + c] - (y[i * m + c] - y[j * m + c])).collect::<Vec<_>>()
        });
        self.evaluate(rows.concat(), self.multiplier_potential())
    }

    /// `u` solving `(L + 11ᵀ) u = B(ρWw)`, the least-squares fit of the edge
    /// multipliers.
    fn multiplier_potential(&self) -> Vec<f64> {
        let (m, b) = (self.m, self.block());
        let (state, graph, rho) = (&self.state, self.graph, self.rho);
        let weights = &self.weights;
        let rows = par::map_range(self.exec, graph.n, |i| {
            let mut acc = vec![0.0; m];
            for &(e, sign) in &graph.incidence[i] {
                let omega = weights[e];
                for c in 0..m {
                    acc[c] += sign * rho * omega * state[e * b + 2 * m + c];
                }
            }
            acc
        });
        let mut u = rows.concat();
        self.lap.solve(&mut u, m);
        u
    }

    /// Active-set refinements on the support `A` of `z`, returned as feasible
    /// candidates:
    ///
    /// * the flow projected onto `{B_A π = μ}` with the potential corrected in
    ///   least squares towards `u(i) − u(j) = dₑ zₑ/‖zₑ‖` on `A` (exact when
    ///   the support is a forest);
    /// * for small supports, Newton's method on the restricted problem
    ///   `min Σ_A dₑ‖πₑ‖ s.t. B_A π = μ`, which is smooth while no flow on `A`
    ///   vanishes, with the potential read off its multipliers.
    fn polish(&self, newton: bool) -> Vec<Candidate> {
        let (m, b) = (self.m, self.block());
        let support: Vec<usize> = (0..self.graph.ends.len())
            .filter(|&e| self.state[e * b + m..e * b + 2 * m].iter().any(|&x| x != 0.0))
            .collect();
        if support.is_empty() {
            return Vec::new();
        }
        self.polish_on(&support, newton)
    }

    fn polish_on(&self, support: &[usize], newton: bool) -> Vec<Candidate> {
        let (m, b, n) = (self.m, self.block(), self.graph.n);
        // L_A + Σ_c 1_c 1_cᵀ over the components c of the support graph
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut a = DMatrix::zeros(n, n);
        for &e in support {
            let (i, j) = self.graph.ends[e];
            a[(i, i)] += 1.0;
            a[(j, j)] += 1.0;
            a[(i, j)] -= 1.0;
            a[(j, i)] -= 1.0;
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
        let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
        for i in 0..n {
            for j in 0..n {
                if roots[i] == roots[j] {
                    a[(i, j)] += 1.0;
                }
            }
        }
        let Some(chol) = Cholesky::new(a) else {
            return Vec::new();
        };
        let solve = |rhs: &mut Vec<f64>| {
            let mut mat = DMatrix::from_row_slice(n, m, rhs);
            chol.solve_mut(&mut mat);
            for i in 0..n {
                for c in 0..m {
                    rhs[i * m + c] = mat[(i, c)];
                }
            }
        };

        let mut flows = vec![0.0; self.graph.ends.len() * m];
        for &e in support {
            flows[e * m..(e + 1) * m].copy_from_slice(&self.state[e * b + m..e * b + 2 * m]);
        }
        let mut y = self.incidence_residual(FlowView::Flat(&flows));
        solve(&mut y);
        for &e in support {
            let (i, j) = self.graph.ends[e];
            for c in 0..m {
                flows[e * m + c] -= y[i * m + c] - y[j * m + c];
            }
        }
        let base = self.multiplier_potential();

        let mut u = base.clone();
        let mut rhs = vec![0.0; n * m];
        for &e in support {
            let (i, j) = self.graph.ends[e];
            let z = &self.state[e * b + m..e * b + 2 * m];
            let scale = self.dist[e] / norm(z);
            for c in 0..m {
                let defect = scale * z[c] - (u[i * m + c] - u[j * m + c]);
                rhs[i * m + c] += defect;
                rhs[j * m + c] -= defect;
            }
        }
        solve(&mut rhs);
        u.iter_mut().zip(&rhs).for_each(|(a, d)| *a += d);

        let mut out = Vec::new();
        let newton = if newton { self.newton_refine(support, &roots, &flows, &base) } else { None };
        let cand = self.evaluate(flows, u);
        if cand.feasibility <= POLISH_FEASIBILITY {
            out.push(cand);
        }
        if let Some((flows, u)) = newton {
            let cand = self.evaluate(flows, u);
            if cand.feasibility <= POLISH_FEASIBILITY {
                out.push(cand);
            }
        }
        out
    }

    /// Damped Newton iterations on the KKT system of the problem restricted to
    /// `support`, started from the feasible `flows`. One node per component of
    /// the support graph is grounded to remove the redundant constraints; the
    /// per-component offsets of the resulting potential are taken from `base`.
    fn newton_refine(
        &self,
        support: &[usize],
        roots: &[usize],
        flows: &[f64],
        base: &[f64],
    ) -> Option<(Vec<f64>, Vec<f64>)> {
        let (m, n) = (self.m, self.graph.n);
        let active: Vec<usize> = support.iter().copied().filter(|&e| norm(&flows[e * m..(e + 1) * m]) > 0.0).collect();
        let mut lambda_index = vec![None; n];
        let mut free = 0;
        for i in 0..n {
            if roots[i] != i {
                lambda_index[i] = Some(free);
                free += 1;
            }
        }
        let off = active.len() * m;
        let dim = off + free * m;
        if dim > NEWTON_MAX_DIM || active.is_empty() {
            return None;
        }
        let objective = |p: &[f64]| -> f64 {
            active.iter().enumerate().map(|(k, &e)| self.dist[e] * norm(&p[k * m..(k + 1) * m])).sum()
        };
        let mut p: Vec<f64> = active.iter().flat_map(|&e| flows[e * m..(e + 1) * m].iter().copied()).collect();
        let mut lambda = vec![0.0; free * m];
        for _ in 0..NEWTON_ITERS {
            let mut kkt = DMatrix::zeros(dim, dim);
            let mut rhs = nalgebra::DVector::zeros(dim);
            let mut grad = vec![0.0; off];
            let mut net = vec![0.0; n * m];
            for (k, &e) in active.iter().enumerate() {
                let f = &p[k * m..(k + 1) * m];
                let nf = norm(f);
                if !(nf > 0.0) {
                    return None;
                }
                let d = self.dist[e];
                let curv = d / nf;
                for r in 0..m {
                    grad[k * m + r] = d * f[r] / nf;
                    for c in 0..m {
                        let radial = f[r] * f[c] / (nf * nf);
                        let identity = if r == c { 1.0 + NEWTON_REGULARISATION } else { 0.0 };
                        kkt[(k * m + r, k * m + c)] = curv * (identity - radial);
                    }
                    rhs[k * m + r] = -grad[k * m + r];
                }
                let (i, j) = self.graph.ends[e];
                for (node, sign) in [(i, 1.0), (j, -1.0)] {
                    for c in 0..m {
                        net[node * m + c] += sign * f[c];
                    }
                    if let Some(l) = lambda_index[node] {
                        for c in 0..m {
                            kkt[(k * m + c, off + l * m + c)] = sign;
                            kkt[(off + l * m + c, k * m + c)] = sign;
                        }
                    }
                }
            }
            for i in 0..n {
                if let Some(l) = lambda_index[i] {
                    for c in 0..m {
                        rhs[off + l * m + c] = self.mu[i * m + c] - net[i * m + c];
                    }
                }
            }
            let x = kkt.lu().solve(&rhs)?;
            if x.iter().any(|v| !v.is_finite()) {
                return None;
            }
            lambda.copy_from_slice(&x.as_slice()[off..]);
            let step = &x.as_slice()[..off];
            let slope: f64 = grad.iter().zip(step).map(|(g, s)| g * s).sum();
            let f0 = objective(&p);
            if -slope <= NEWTON_DECREMENT * f0 {
                break;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<f64> = p.iter().zip(step).map(|(a, s)| a + t * s).collect();
                if objective(&trial) <= f0 + 1e-4 * t * slope {
                    p = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }

        let mut out_flows = vec![0.0; self.graph.ends.len() * m];
        for (k, &e) in active.iter().enumerate() {
            out_flows[e * m..(e + 1) * m].copy_from_slice(&p[k * m..(k + 1) * m]);
        }
        // stationarity reads dₑ π̂ₑ = −(λᵢ − λⱼ), so u = −λ on each component
        let mut u = vec![0.0; n * m];
        for i in 0..n {
            if let Some(l) = lambda_index[i] {
                for c in 0..m {
                    u[i * m + c] = -lambda[l * m + c];
                }
            }
        }
        let mut shift = vec![0.0; n * m];
        let mut count = vec![0usize; n];
        for i in 0..n {
            count[roots[i]] += 1;
            for c in 0..m {
                shift[roots[i] * m + c] += base[i * m + c] - u[i * m + c];
            }
        }
        for i in 0..n {
            let r = roots[i];
            for c in 0..m {
                u[i * m + c] += shift[r * m + c] / count[r] as f64;
            }
        }
        Some((out_flows, u))
    }

    /// Shifts `u` to `u₀ = 0`, rescales it to be 1-Lipschitz on the edge set
    /// and measures the pair.
    fn evaluate(&self, flows: Vec<f64>, mut u: Vec<f64>) -> Candidate {
        let m = self.m;
        let graph = self.graph;
        let ne = graph.ends.len();
        let feasibility = norm(&self.incidence_residual(FlowView::Flat(&flows)));
        let base = u[..m].to_vec();
        for row in u.chunks_mut(m) {
            row.iter_mut().zip(&base).for_each(|(a, b)| *a -= b);
        }
        let gap = |i: usize, j: usize| (0..m).map(|c| (u[i * m + c] - u[j * m + c]).powi(2)).sum::<f64>().sqrt();
        let lip = match self.all_pairs {
            Some((dm, scale)) => par::map_range(self.exec, graph.n, |i| {
                (i + 1..graph.n).map(|j| gap(i, j) / (dm.get(i, j) / scale)).fold(0.0, f64::max)
            }),
            None => par::map_range(self.exec, ne, |e| {
                let (i, j) = graph.ends[e];
                gap(i, j) / self.dist[e]
            }),
        }
        .into_iter()
        .fold(0.0, f64::max);
        if lip > 1.0 {
            u.iter_mut().for_each(|x| *x /= lip);
        }
        let cost: f64 = flows.chunks(m).zip(&self.dist).map(|(f, d)| d * norm(f)).sum();
        let pairing: f64 = u.chunks(m).zip(self.mu.chunks(m)).map(|(a, b)| dot(a, b)).sum();
        let tv: f64 = flows.chunks(m).map(norm).sum();
        // largest relative complementary-slackness defect over edges carrying
        // more than `slack_floor·tv` flow
        let slack = par::map_range(self.exec, ne, |e| {
            let f = &flows[e * m..(e + 1) * m];
            let nf = norm(f);
            if nf <= self.slack_floor * tv {
                return 0.0;
            }
            let (i, j) = graph.ends[e];
            let du: Vec<f64> = (0..m).map(|c| u[i * m + c] - u[j * m + c]).collect();
            let d = self.dist[e];
            let radial = 1.0 - norm(&du) / d;
            let directional = 1.0 - dot(&du, f) / (d * nf);
            radial.max(directional)
        })
        .into_iter()
        .fold(0.0, f64::max);
        Candidate { flows, potential: u, cost, pairing, feasibility, lip: lip.min(1.0), slack }
    }
}

enum FlowView<'b> {
    /// Slot `k` of the interleaved state.
    State(&'b [f64], usize),
    Flat(&'b [f64]),
}

impl FlowView<'_> {
    #[inline]
    fn get(&self, e: usize, m: usize) -> &[f64] {
        match self {
            FlowView::State(s, k) => &s[e * 3 * m + k * m..e * 3 * m + (k + 1) * m],
            FlowView::Flat(f) => &f[e * m..(e + 1) * m],
        }
    }
}

/// Solves the transport problem and its dual simultaneously.
///
/// Returns the coupling, a potential normalised to `u[0] = 0`, and a report.
/// Hitting `max_iters` is not an error: the best pair found (smallest gap) is
/// returned with status [`SolveStatus::IterLimit`].
pub fn solve(instance: &Instance, params: &SolverParams) -> Result<(VectorCoupling, PotentialField, SolveReport)> {
    params.validate()?;
    let n = instance.len();
    let m = instance.target_dim();
    let scale_mass = instance.measure().total_variation();
    let graph = Graph::build(instance, params.edge_policy, params.exec)?;
    let mut notes = Vec::new();
    if graph.restricted {
        notes.push(format!(
            "edge set restricted to {} nearest neighbours: the value is an upper bound on the norm and the potential is 1-Lipschitz on the edge set only",
            match params.edge_policy {
                EdgePolicy::Knn(k) => k,
                EdgePolicy::Complete => 0,
            }
        ));
    }
    if scale_mass == 0.0 || n < 2 {
        let report = SolveReport {
            primal_value: 0.0,
            dual_value: 0.0,
            gap: 0.0,
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            admm_residuals: (0.0, 0.0),
            penalty: params.penalty,
            edges: graph.ends.len(),
            status: SolveStatus::Converged,
            notes,
        };
        return Ok((VectorCoupling::empty(m), PotentialField::zeros(n, m), report));
    }
    let scale_dist = instance.distances().max();
    let dist: Vec<f64> = graph.ends.iter().map(|&(i, j)| instance.distance(i, j) / scale_dist).collect();
    let mu: Vec<f64> = instance.measure().as_slice().iter().map(|w| w / scale_mass).collect();
    let mean = dist.iter().sum::<f64>() / dist.len() as f64;
    let weights: Vec<f64> = dist.iter().map(|d| d / mean).collect();
    let conductance: Vec<f64> = weights.iter().map(|w| 1.0 / w).collect();
    let weighted_lap = LaplaceSolver::weighted(&graph, Some(&conductance))?;
    let mut admm = Admm {
        graph: &graph,
        m,
        exec: params.exec,
        lap: LaplaceSolver::new(&graph)?,
        dist,
        mu,
        state: vec![0.0; graph.ends.len() * 3 * m],
        weights,
        weighted_lap,
        rho: params.penalty,
        alpha: params.relaxation,
        slack_floor: SLACK_FACTOR * params.tol_gap,
        all_pairs: (!graph.restricted).then_some((instance.distances(), scale_dist)),
    };

    let unscale = scale_mass * scale_dist;
    // worst of the three stopping ratios; the pair is accepted when it is ≤ 1
    let merit = |c: &Candidate| {
        let cost = c.cost * unscale;
        let gap = c.gap() * unscale / (params.tol_gap * (1.0 + cost.abs()));
        let feasibility = c.feasibility * scale_mass / (params.tol_primal * (1.0 + scale_mass));
        let slack = c.slack / (SLACK_FACTOR * params.tol_gap);
        gap.max(feasibility).max(slack)
    };
    let gap_ok = |c: &Candidate| merit(c) <= 1.0;

    let mut best: Option<Candidate> = None;
    let mut residuals = (f64::INFINITY, f64::INFINITY);
    let mut iterations = 0;
    let mut status = SolveStatus::IterLimit;
    let mut balance_interval = BALANCE_EVERY;
    let mut next_balance = BALANCE_EVERY;
    let mut newton_interval = GAP_CHECK_EVERY;
    let mut next_newton = GAP_CHECK_EVERY;
    for it in 1..=params.max_iters {
        iterations = it;
        let check = it % BALANCE_EVERY == 0;
        let sums = admm.step(check);
        if !check {
            continue;
        }
        let r = sums.r2.sqrt();
        let s = admm.rho * sums.s2.sqrt();
        if !(r.is_finite() && s.is_finite()) {
            return Err(Error::NumericalBreakdown(format!("non-finite residual at iteration {it}")));
        }
        let r_rel = r / sums.pi2.sqrt().max(sums.z2.sqrt()).max(f64::MIN_POSITIVE);
        let s_rel = s / (admm.rho * sums.w2.sqrt()).max(f64::MIN_POSITIVE);
        residuals = (r_rel, s_rel);
        let candidate_converged = r_rel <= params.tol_primal && s_rel <= params.tol_dual;
        if candidate_converged || it % GAP_CHECK_EVERY == 0 || it == params.max_iters {
            let mut cand = admm.candidate();
            // the Newton stage is cubic in the support size, so its attempts
            // are spaced geometrically unless the pair is about to be accepted
            let newton = candidate_converged || gap_ok(&cand) || it >= next_newton;
            if newton {
                next_newton = it + newton_interval;
                newton_interval = (newton_interval + newton_interval / 2).min(MAX_NEWTON_INTERVAL);
            }
            for p in admm.polish(newton) {
                if merit(&p) < merit(&cand) {
                    cand = p;
                }
            }
            let done = gap_ok(&cand);
            if done {
                best = Some(cand);
                status = SolveStatus::Converged;
                break;
            }
            if best.as_ref().is_none_or(|b| merit(&cand) <= merit(b)) {
                best = Some(cand);
            }
        }
        if it >= next_balance {
            let factor = if r_rel > 10.0 * s_rel {
                2.0
            } else if s_rel > 10.0 * r_rel {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 {
                admm.rescale_penalty(factor);
                // widen the interval so that ρ eventually settles
                balance_interval = (balance_interval + balance_interval / 4).min(MAX_BALANCE_INTERVAL);
            }
            next_balance = it + balance_interval;
        }
        if !(admm.rho >= PENALTY_RANGE.0 && admm.rho <= PENALTY_RANGE.1) {
            return Err(Error::NumericalBreakdown(format!("penalty {} left the admissible range", admm.rho)));
        }
    }
    let best = match best {
        Some(b) => b,
        None => admm.candidate(),
    };

    let mut pairs = Vec::new();
    let mut flows = Vec::new();
    for (e, f) in best.flows.chunks(m).enumerate() {
        if f.iter().any(|&x| x != 0.0) {
            pairs.push(graph.ends[e]);
            flows.extend(f.iter().map(|x| x * scale_mass));
        }
    }
    let coupling = VectorCoupling::new(m, pairs, flows)?;
    let potential = PotentialField::new(m, best.potential.iter().map(|x| x * scale_dist).collect())?;
    let primal_value = best.cost * unscale;
    let dual_value = best.pairing * unscale;
    let report = SolveReport {
        primal_value,
        dual_value,
        gap: primal_value - dual_value,
        iterations,
        primal_residual: best.feasibility * scale_mass,
        dual_residual: (best.lip - 1.0).max(0.0),
        admm_residuals: residuals,
        penalty: admm.rho,
        edges: graph.ends.len(),
        status,
        notes,
    };
    Ok((coupling, potential, report))
}

/// `‖μ‖_KR`: the optimal value, or an error if the solver did not converge.
pub fn kr_norm(instance: &Instance, params: &SolverParams) -> Result<f64> {
    let (_, _, report) = solve(instance, params)?;
    match report.status {
        SolveStatus::Converged => Ok(report.primal_value),
        SolveStatus::IterLimit => Err(Error::IterLimit { iterations: report.iterations, gap: report.gap }),
    }
}

/// Solves several independent instances, in parallel across instances when
/// `params.exec` asks for it. Each inner solve then runs sequentially.
pub fn solve_batch(
    instances: &[Instance],
    params: &SolverParams,
) -> Vec<Result<(VectorCoupling, PotentialField, SolveReport)>> {
    let inner = SolverParams { exec: Exec::Sequential, ..params.clone() };
    par::map_range(params.exec, instances.len(), |k| solve(&instances[k], &inner))
}

/// Closed-form norm of a signed measure on the line: `∫ |F(t)| dt` for the
/// cumulative mass `F`.
pub fn line_oracle(instance: &Instance) -> Result<f64> {
    if instance.ambient_dim() != 1 || instance.target_dim() != 1 {
        return Err(Error::WrongDimension(format!(
            "line oracle needs n = m = 1, got n = {}, m = {}",
            instance.ambient_dim(),
            instance.target_dim()
        )));
    }
    let mut atoms: Vec<(f64, f64)> =
        (0..instance.len()).map(|i| (instance.cloud().point(i)[0], instance.measure().weight(i)[0])).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cumulative = 0.0;
    let mut total = 0.0;
    for w in atoms.windows(2) {
        cumulative += w[0].1;
        total += cumulative.abs() * (w[1].0 - w[0].0);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line(points: &[f64], masses: &[f64]) -> Instance {
        let p: Vec<Vec<f64>> = points.iter().map(|&x| vec![x]).collect();
        let w: Vec<Vec<f64>> = masses.iter().map(|&x| vec![x]).collect();
        Instance::build(&p, &w).unwrap()
    }

    #[test]
    fn line_oracle_examples() {
        assert_eq!(line_oracle(&line(&[0.0, 1.0, 2.0], &[1.0, -2.0, 1.0])).unwrap(), 2.0);
        assert_eq!(line_oracle(&line(&[0.0, 1.0], &[1.0, -1.0])).unwrap(), 1.0);
        assert_eq!(line_oracle(&line(&[0.0, 1.0], &[-3.0, 3.0])).unwrap(), 3.0);
        assert_eq!(line_oracle(&line(&[2.0, 0.0, 1.0], &[1.0, 1.0, -2.0])).unwrap(), 2.0);
        let planar = Instance::build(&[vec![0.0, 0.0], vec![1.0, 0.0]], &[vec![1.0], vec![-1.0]]).unwrap();
        assert!(matches!(line_oracle(&planar), Err(Error::WrongDimension(_))));
    }

    #[test]
    fn two_point_value() {
        let inst = Instance::build(&[vec![0.0, 0.0], vec![3.0, 4.0]], &[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let (pi, u, report) = solve(&inst, &SolverParams::default()).unwrap();
        assert_eq!(report.status, SolveStatus::Converged);
        assert_relative_eq!(report.primal_value, 5.0, max_relative = 1e-6);
        assert!(report.gap >= -1e-12);
        assert_eq!(u.value(0), &[0.0, 0.0]);
        assert!(inst.feasibility_residual(&pi).unwrap() <= 1e-8 * 3.0);
    }

    #[test]
    fn zero_measure() {
        let inst = Instance::build(&[vec![0.0], vec![1.0], vec![5.0]], &vec![vec![0.0, 0.0]; 3]).unwrap();
        let (pi, u, report) = solve(&inst, &SolverParams::default()).unwrap();
        assert!(pi.is_empty());
        assert_eq!(report.primal_value, 0.0);
        assert_eq!(u, PotentialField::zeros(3, 2));
        assert_eq!(kr_norm(&inst, &SolverParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn counterexample_value() {
        let inst = Instance::build(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]],
            &[vec![1.0, 0.0], vec![1.0, 2.0], vec![-2.0, -2.0]],
        )
        .unwrap();
        let (_, _, report) = solve(&inst, &SolverParams::default()).unwrap();
        assert_eq!(report.status, SolveStatus::Converged);
        assert_relative_eq!(report.primal_value, 1.0 + 5f64.sqrt(), max_relative = 1e-6);
    }

    #[test]
    fn small_line_matches_oracle() {
        let inst = line(&[0.0, 0.3, 1.1, 2.0, 2.4], &[1.0, -0.5, 2.0, -1.5, -1.0]);
        let v = kr_norm(&inst, &SolverParams::default()).unwrap();
        let o = line_oracle(&inst).unwrap();
        assert!((v - o).abs() <= 1e-6 * (1.0 + o), "{v} vs {o}");
    }

    #[test]
    fn knn_is_upper_bound_and_noted() {
        let pts: Vec<Vec<f64>> = (0..8).map(|i| vec![(i as f64).cos() * 3.0, (i as f64 * 1.7).sin()]).collect();
        let w: Vec<Vec<f64>> = (0..8).map(|i| vec![if i < 4 { 1.0 } else { -1.0 }, (i as f64) - 3.5]).collect();
        let inst = Instance::build(&pts, &w).unwrap();
        let full = kr_norm(&inst, &SolverParams::default()).unwrap();
        let params = SolverParams { edge_policy: EdgePolicy::Knn(3), ..Default::default() };
        let (_, _, report) = solve(&inst, &params).unwrap();
        assert_eq!(report.status, SolveStatus::Converged);
        assert!(report.primal_value >= full * (1.0 - 1e-6));
        assert_eq!(report.notes.len(), 1);
    }

    #[test]
    fn knn_disconnected() {
        let inst = line(&[0.0, 0.1, 10.0, 10.1], &[1.0, -1.0, 1.0, -1.0]);
        let params = SolverParams { edge_policy: EdgePolicy::Knn(1), ..Default::default() };
        assert!(matches!(solve(&inst, &params), Err(Error::DisconnectedEdgeSet { components: 2 })));
    }

    #[test]
    fn params_validated() {
        let inst = line(&[0.0, 1.0], &[1.0, -1.0]);
        for bad in [
            SolverParams { max_iters: 0, ..Default::default() },
            SolverParams { tol_gap: 0.0, ..Default::default() },
            SolverParams { penalty: f64::NAN, ..Default::default() },
            SolverParams { relaxation: 2.0, ..Default::default() },
        ] {
            assert!(matches!(solve(&inst, &bad), Err(Error::InvalidParameter(_))));
        }
    }

    #[test]
    fn iter_limit_returns_best_pair() {
        let mut rng = crate::random::rng(3);
        let inst = crate::random::random_instance(&mut rng, 2, 2, 25).unwrap();
        let params = SolverParams { max_iters: 20, ..Default::default() };
        let (pi, _, report) = solve(&inst, &params).unwrap();
        assert_eq!(report.status, SolveStatus::IterLimit);
        assert!(report.gap >= -1e-12);
        assert!(inst.feasibility_residual(&pi).unwrap() < 1e-10);
        assert!(matches!(kr_norm(&inst, &params), Err(Error::IterLimit { .. })));
    }

    #[test]
    fn modes_are_bit_identical() {
        let pts: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()]).collect();
        let w: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64) - 5.5, if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        let inst = Instance::build(&pts, &w).unwrap();
        let seq = solve(&inst, &SolverParams { exec: Exec::Sequential, ..Default::default() }).unwrap();
        let par = solve(&inst, &SolverParams { exec: Exec::Parallel, ..Default::default() }).unwrap();
        assert_eq!(seq.0, par.0);
        assert_eq!(seq.1, par.1);
        assert_eq!(seq.2, par.2);
    }
}
