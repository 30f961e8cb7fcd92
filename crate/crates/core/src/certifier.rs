//! Optimality certificates for primal-dual pairs.
//!
//! A pair `(π, u)` is optimal iff `π` is feasible, `u` is 1-Lipschitz, and the
//! pairing of `u` with `μ` equals the cost of `π`; edge-wise this means every
//! flow `f` on `(i, j)` satisfies `⟨u(i) − u(j), f⟩ = d(i, j)‖f‖`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, sub};
use crate::measure::{Instance, PotentialField, VectorCoupling};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Optimal,
    Suboptimal,
    Infeasible,
}

/// An edge whose flow is above the threshold but whose potential difference
/// does not saturate the distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackViolation {
    /// Index into the coupling's entry list.
    pub edge: usize,
    pub pair: (usize, usize),
    pub potential_gap: f64,
    pub directional: f64,
    pub distance: f64,
    pub flow_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalityCertificate {
    pub cost: f64,
    pub pairing: f64,
    pub gap: f64,
    /// `‖net(π) − μ‖`.
    pub feasibility_primal: f64,
    /// `max(0, Lip(u) − 1)`.
    pub feasibility_dual: f64,
    pub lipschitz_pair: Option<(usize, usize)>,
    pub flow_threshold: f64,
    pub slack_violations: Vec<SlackViolation>,
    pub tol: f64,
    pub verdict: Verdict,
}

fn check_dims(pi: &VectorCoupling, u: &PotentialField, instance: &Instance) -> Result<()> {
    let m = instance.target_dim();
    if pi.target_dim() != m || u.target_dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "coupling has m = {}, potential m = {}, measure m = {m}",
            pi.target_dim(),
            u.target_dim()
        )));
    }
    if u.len() != instance.len() {
        return Err(Error::DimensionMismatch(format!(
            "potential has {} values for {} points",
            u.len(),
            instance.len()
        )));
    }
    Ok(())
}

/// Checks primal feasibility, the Lipschitz bound, the duality gap and
/// edge-wise complementary slackness at relative tolerance `tol`.
pub fn certify(
    pi: &VectorCoupling,
    u: &PotentialField,
    instance: &Instance,
    tol: f64,
) -> Result<OptimalityCertificate> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidParameter("tolerance must be nonnegative".into()));
    }
    check_dims(pi, u, instance)?;
    let cloud = instance.cloud();
    let feasibility_primal = instance.feasibility_residual(pi)?;
    let lip = u.lipschitz_constant(cloud)?;
    let feasibility_dual = (lip.constant - 1.0).max(0.0);
    let cost = pi.cost(cloud);
    let pairing = u.pairing(instance.measure())?;
    let gap = cost - pairing;
    let flow_threshold = tol * pi.total_variation();

    let mut slack_violations = Vec::new();
    for (e, (i, j, f)) in pi.entries().enumerate() {
        let flow_norm = norm(f);
        if flow_norm <= flow_threshold {
            continue;
        }
        let du = sub(u.value(i), u.value(j));
        let distance = instance.distance(i, j);
        let potential_gap = norm(&du);
        let directional = dot(&du, f);
        if potential_gap < (1.0 - tol) * distance || directional < (1.0 - tol) * distance * flow_norm {
            slack_violations.push(SlackViolation {
                edge: e,
                pair: (i, j),
                potential_gap,
                directional,
                distance,
                flow_norm,
            });
        }
    }

    let mass = instance.measure().total_variation();
    let verdict = if feasibility_primal > tol * (1.0 + mass) || feasibility_dual > tol {
        Verdict::Infeasible
    } else if gap.abs() <= tol * (1.0 + cost.abs()) && slack_violations.is_empty() {
        Verdict::Optimal
    } else {
        Verdict::Suboptimal
    };
    Ok(OptimalityCertificate {
        cost,
        pairing,
        gap,
        feasibility_primal,
        feasibility_dual,
        lipschitz_pair: lip.pair,
        flow_threshold,
        slack_violations,
        tol,
        verdict,
    })
}

/// Entries of `π` carrying flow above `tol·tv(π)` on which `u` saturates the
/// distance, `‖u(i) − u(j)‖ ≥ (1 − tol)·d(i, j)`. Returned as indices into the
/// coupling's entry list, in order.
pub fn isometry_saturation_set(
    pi: &VectorCoupling,
    u: &PotentialField,
    instance: &Instance,
    tol: f64,
) -> Result<Vec<usize>> {
    check_dims(pi, u, instance)?;
    let threshold = tol * pi.total_variation();
    Ok(pi
        .entries()
        .enumerate()
        .filter(|(_, (i, j, f))| norm(f) > threshold && u.gap(*i, *j) >= (1.0 - tol) * instance.distance(*i, *j))
        .map(|(e, _)| e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{solve, SolverParams};

    fn two_point() -> (Instance, VectorCoupling, PotentialField) {
        let inst = Instance::build(&[vec![0.0, 0.0], vec![3.0, 4.0]], &[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let pi = VectorCoupling::from_entries(2, &[(0, 1, vec![1.0, 0.0])]).unwrap();
        // u(z) = ⟨z, (x − y)/5⟩ (1, 0)
        let u = PotentialField::from_rows(&[vec![0.0, 0.0], vec![-5.0, 0.0]]).unwrap();
        (inst, pi, u)
    }

    #[test]
    fn analytic_two_point_is_optimal() {
        let (inst, pi, u) = two_point();
        let cert = certify(&pi, &u, &inst, 1e-9).unwrap();
        assert_eq!(cert.verdict, Verdict::Optimal);
        assert!(cert.slack_violations.is_empty());
        assert_eq!(cert.gap, 0.0);
        assert_eq!(isometry_saturation_set(&pi, &u, &inst, 1e-9).unwrap(), vec![0]);
    }

    #[test]
    fn zero_potential_is_suboptimal() {
        let (inst, pi, _) = two_point();
        let cert = certify(&pi, &PotentialField::zeros(2, 2), &inst, 1e-6).unwrap();
        assert_eq!(cert.verdict, Verdict::Suboptimal);
        assert_eq!(cert.gap, cert.cost);
        assert_eq!(cert.slack_violations.len(), 1);
    }

    #[test]
    fn perturbed_coupling_is_infeasible() {
        let (inst, _, u) = two_point();
        let pi = VectorCoupling::from_entries(2, &[(0, 1, vec![1.1, 0.0])]).unwrap();
        assert_eq!(certify(&pi, &u, &inst, 1e-6).unwrap().verdict, Verdict::Infeasible);
    }

    #[test]
    fn non_lipschitz_potential_is_infeasible() {
        let (inst, pi, _) = two_point();
        let u = PotentialField::from_rows(&[vec![0.0, 0.0], vec![-6.0, 0.0]]).unwrap();
        let cert = certify(&pi, &u, &inst, 1e-6).unwrap();
        assert_eq!(cert.verdict, Verdict::Infeasible);
        assert!((cert.feasibility_dual - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_coupling_saturation_set_is_empty() {
        let (inst, _, u) = two_point();
        assert!(isometry_saturation_set(&VectorCoupling::empty(2), &u, &inst, 1e-6).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch() {
        let (inst, pi, _) = two_point();
        assert!(matches!(certify(&pi, &PotentialField::zeros(2, 3), &inst, 1e-6), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn solver_output_certifies_and_constant_shift_keeps_saturation() {
        let inst = Instance::build(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]],
            &[vec![1.0, 0.0], vec![1.0, 2.0], vec![-2.0, -2.0]],
        )
        .unwrap();
        let (pi, u, _) = solve(&inst, &SolverParams::default()).unwrap();
        let cert = certify(&pi, &u, &inst, 1e-5).unwrap();
        assert_eq!(cert.verdict, Verdict::Optimal, "{cert:?}");
        let sat = isometry_saturation_set(&pi, &u, &inst, 1e-5).unwrap();
        let pairs: Vec<_> = sat.iter().map(|&e| pi.pair(e)).collect();
        assert_eq!(pairs, vec![(0, 2), (1, 2)]);
        let shifted = u.shifted(&[4.0, -1.5]);
        assert_eq!(isometry_saturation_set(&pi, &shifted, &inst, 1e-5).unwrap(), sat);
        assert_eq!(certify(&pi, &shifted, &inst, 1e-5).unwrap().verdict, Verdict::Optimal);
    }
}
