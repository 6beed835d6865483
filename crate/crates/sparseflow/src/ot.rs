//! Soft matching between the two frames by entropy-regularized optimal
//! transport.
//!
//! Costs are cosine distances between fused features, gated by a Euclidean
//! displacement limit. The Sinkhorn scaling loop supports relaxed marginals
//! (exponent rho = lambda / (lambda + epsilon)); rho = 1 recovers the
//! balanced algorithm exactly. A brute-force assignment solver over
//! permutations serves as the correctness oracle at tiny sizes.

use crate::error::{FlowError, Result};
use crate::geometry::PointCloud;
use crate::numerics::{Tape, Tensor, Value};

/// Additive offset keeping epsilon and lambda strictly positive.
pub const OT_OFFSET: f64 = 0.03;
/// Floor used in Sinkhorn divisions so fully masked rows stay finite.
pub const DIV_FLOOR: f64 = 1e-30;

/// Learnable regularization (stored as logs) plus fixed loop hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct OtParams {
    pub log_epsilon: f64,
    pub log_lambda: f64,
    pub iterations: usize,
    pub d_max: f64,
}

impl Default for OtParams {
    fn default() -> OtParams {
        OtParams { log_epsilon: 0.0, log_lambda: 0.0, iterations: 1, d_max: 10.0 }
    }
}

impl OtParams {
    pub fn epsilon(&self) -> f64 {
        self.log_epsilon.exp() + OT_OFFSET
    }

    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp() + OT_OFFSET
    }

    /// Marginal relaxation exponent lambda / (lambda + epsilon), in (0, 1).
    pub fn rho(&self) -> f64 {
        let (e, l) = (self.epsilon(), self.lambda());
        l / (l + e)
    }
}

/// Uniform marginal weights 1/n.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Cosine-distance cost between the two frames' features: `1 - cos(f_i, f_j)`
/// per pair, in [0, 2]. Zero feature rows get distance 1 against everything.
pub fn cost_matrix(tape: &Tape, f_t: &Tensor, f_t1: &Tensor) -> Tensor {
    assert_eq!(f_t.shape()[1], f_t1.shape()[1], "feature widths differ");
    let a = tape.l2_normalize_rows(f_t);
    let b = tape.l2_normalize_rows(f_t1);
    let cos = tape.matmul(&a, &tape.transpose(&b));
    tape.add_const(&tape.neg(&cos), 1.0)
}

/// Admissibility gate: true iff the pair's displacement is at most `d_max`.
pub fn distance_mask(pc_t: &PointCloud, pc_t1: &PointCloud, d_max: f64) -> Vec<bool> {
    let mut mask = Vec::with_capacity(pc_t.len() * pc_t1.len());
    for p in pc_t.points() {
        for q in pc_t1.points() {
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            mask.push(d2 <= d_max * d_max);
        }
    }
    mask
}

/// Plain (untracked) transport solve; the oracle-facing twin of
/// [`sinkhorn_tape`]. Returns the kernel, scalings and plan.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub kernel: Value,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub plan: Value,
}

/// Sinkhorn scaling on raw values. `rho = 1` runs the balanced update with
/// no exponentiation at all, so exact rationals (like the uniform plan on a
/// zero cost) come out bitwise.
pub fn sinkhorn(
    cost: &Value,
    mask: &[bool],
    epsilon: f64,
    rho: f64,
    iterations: usize,
    mu_s: &[f64],
    mu_t: &[f64],
) -> Result<TransportPlan> {
    let (n, m) = (cost.shape()[0], cost.shape()[1]);
    assert_eq!(mask.len(), n * m, "mask length mismatch");
    assert_eq!(mu_s.len(), n, "mu_s length mismatch");
    assert_eq!(mu_t.len(), m, "mu_t length mismatch");
    assert!(epsilon > 0.0 && rho > 0.0 && rho <= 1.0, "epsilon={epsilon} rho={rho}");
    if !mask.iter().any(|&v| v) {
        return Err(FlowError::NoCorrespondence);
    }
    // In the balanced case the plan is invariant to row/column rescaling of
    // the kernel (absorbed into a and b), so shift each row's and column's
    // admissible minimum cost to zero first. Without this, small epsilon
    // underflows the scaling products and the division floor corrupts the
    // iteration. Skipped for rho < 1 where the rescaling is not neutral.
    let mut shifted = cost.data().to_vec();
    if rho == 1.0 {
        for i in 0..n {
            let row_min = (0..m)
                .filter(|&j| mask[i * m + j])
                .map(|j| shifted[i * m + j])
                .fold(f64::INFINITY, f64::min);
            if row_min.is_finite() && row_min != 0.0 {
                for j in 0..m {
                    shifted[i * m + j] -= row_min;
                }
            }
        }
        for j in 0..m {
            let col_min = (0..n)
                .filter(|&i| mask[i * m + j])
                .map(|i| shifted[i * m + j])
                .fold(f64::INFINITY, f64::min);
            if col_min.is_finite() && col_min != 0.0 {
                for i in 0..n {
                    shifted[i * m + j] -= col_min;
                }
            }
        }
    }
    let kernel: Vec<f64> = shifted
        .iter()
        .zip(mask)
        .map(|(&c, &ok)| if ok { (-c / epsilon).exp() } else { 0.0 })
        .collect();
    let mut a = vec![1.0; n];
    let mut b = vec![1.0; m];
    // compose pow as exp(rho * ln x) to agree bit for bit with the tape path
    let pow = |x: f64, r: f64| (r * x.max(DIV_FLOOR).ln()).exp();
    for _ in 0..iterations {
        for j in 0..m {
            let mut s = 0.0;
            for i in 0..n {
                s += kernel[i * m + j] * a[i];
            }
            let q = mu_t[j] / s.max(DIV_FLOOR);
            b[j] = if rho == 1.0 { q } else { pow(q, rho) };
        }
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..m {
                s += kernel[i * m + j] * b[j];
            }
            let q = mu_s[i] / s.max(DIV_FLOOR);
            a[i] = if rho == 1.0 { q } else { pow(q, rho) };
        }
    }
    let mut plan = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            plan[i * m + j] = a[i] * kernel[i * m + j] * b[j];
        }
    }
    Ok(TransportPlan {
        kernel: Value::new(vec![n, m], kernel),
        a,
        b,
        plan: Value::new(vec![n, m], plan),
    })
}

/// Differentiable Sinkhorn: gradients flow into the cost and into the log
/// regularization scalars. `log_epsilon` and `log_lambda` are one-element
/// tensors; epsilon = exp(log_epsilon) + 0.03 and likewise lambda.
pub fn sinkhorn_tape(
    tape: &Tape,
    cost: &Tensor,
    mask: &[bool],
    log_epsilon: &Tensor,
    log_lambda: &Tensor,
    iterations: usize,
    mu_s: &[f64],
    mu_t: &[f64],
) -> Result<Tensor> {
    let (n, m) = (cost.shape()[0], cost.shape()[1]);
    assert_eq!(mask.len(), n * m, "mask length mismatch");
    if !mask.iter().any(|&v| v) {
        return Err(FlowError::NoCorrespondence);
    }
    let eps = tape.add_const(&tape.exp(log_epsilon), OT_OFFSET);
    let lam = tape.add_const(&tape.exp(log_lambda), OT_OFFSET);
    let rho = tape.div(&lam, &tape.add(&lam, &eps));
    let mut kernel = tape.exp(&tape.neg(&tape.div_s(cost, &eps)));
    if mask.iter().any(|&v| !v) {
        let gate: Vec<f64> = mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        kernel = tape.mul(&kernel, &Tensor::constant(Value::new(vec![n, m], gate)));
    }
    let mu_s_t = Tensor::constant(Value::new(vec![n, 1], mu_s.to_vec()));
    let mu_t_t = Tensor::constant(Value::new(vec![m, 1], mu_t.to_vec()));
    let mut a = Tensor::constant(Value::ones(vec![n, 1]));
    let mut b = Tensor::constant(Value::ones(vec![m, 1]));
    let kernel_t = tape.transpose(&kernel);
    let pow = |x: &Tensor| tape.exp(&tape.mul_s(&tape.ln_clamped(x, DIV_FLOOR), &rho));
    for _ in 0..iterations {
        let kta = tape.matmul(&kernel_t, &a);
        b = pow(&tape.div_floor(&mu_t_t, &kta, DIV_FLOOR));
        let kb = tape.matmul(&kernel, &b);
        a = pow(&tape.div_floor(&mu_s_t, &kb, DIV_FLOOR));
    }
    Ok(tape.mul_colvec(&tape.mul_rowvec(&kernel, &b), &a))
}

/// Barycentric initial flow: each source point moves toward the plan-weighted
/// mean of the targets. Fully masked rows get zero flow and a false flag.
pub fn initial_flow(
    tape: &Tape,
    plan: &Tensor,
    pc_t: &PointCloud,
    pc_t1: &PointCloud,
) -> (Tensor, Vec<bool>) {
    let (n, m) = (plan.shape()[0], plan.shape()[1]);
    assert_eq!(n, pc_t.len(), "plan rows vs source points");
    assert_eq!(m, pc_t1.len(), "plan cols vs target points");
    let row_mass = tape.row_sums(plan);
    let matched: Vec<bool> = row_mass.data().iter().map(|&s| s > 0.0).collect();
    let targets = Tensor::constant(Value::new(vec![m, 3], pc_t1.flat()));
    let weighted = tape.matmul(plan, &targets);
    let barycenter = tape.div_colvec_floor(&weighted, &row_mass, DIV_FLOOR);
    let sources = Tensor::constant(Value::new(vec![n, 3], pc_t.flat()));
    let gate: Vec<f64> = matched.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let flow = tape.mul_colvec(
        &tape.sub(&barycenter, &sources),
        &Tensor::constant(Value::new(vec![n, 1], gate)),
    );
    (flow, matched)
}

/// Exhaustive minimum-cost assignment over admissible permutations; the
/// verification oracle for small problems (n <= 8).
pub fn lp_assignment_oracle(cost: &Value, mask: &[bool]) -> Result<(Vec<usize>, f64)> {
    let n = cost.shape()[0];
    assert_eq!(cost.shape()[1], n, "oracle needs a square cost");
    assert!(n <= 8, "oracle is exponential; n={n} exceeds 8");
    assert_eq!(mask.len(), n * n, "mask length mismatch");
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut sigma: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn rec(
        i: usize,
        n: usize,
        cost: &[f64],
        mask: &[bool],
        sigma: &mut Vec<usize>,
        used: &mut [bool],
        acc: f64,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if let Some((_, c)) = best {
            if acc >= *c {
                return;
            }
        }
        if i == n {
            *best = Some((sigma.clone(), acc));
            return;
        }
        for j in 0..n {
            if used[j] || !mask[i * n + j] {
                continue;
            }
            used[j] = true;
            sigma.push(j);
            rec(i + 1, n, cost, mask, sigma, used, acc + cost[i * n + j], best);
            sigma.pop();
            used[j] = false;
        }
    }
    rec(0, n, cost.data(), mask, &mut sigma, &mut used, 0.0, &mut best);
    best.ok_or(FlowError::NoAssignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn full_mask(n: usize, m: usize) -> Vec<bool> {
        vec![true; n * m]
    }

    fn random_cost(n: usize, seed: u64) -> Value {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Value::new(vec![n, n], (0..n * n).map(|_| rng.gen_range(0.0..2.0)).collect())
    }

    #[test]
    fn identical_features_cost_zero() {
        let tape = Tape::new();
        let f = Tensor::constant(Value::new(vec![1, 3], vec![1.0, 2.0, 2.0]));
        let c = cost_matrix(&tape, &f, &f);
        assert!(c.data()[0].abs() < 1e-12);
    }

    #[test]
    fn antiparallel_features_cost_two() {
        let tape = Tape::new();
        let a = Tensor::constant(Value::new(vec![1, 2], vec![3.0, 4.0]));
        let b = Tensor::constant(Value::new(vec![1, 2], vec![-3.0, -4.0]));
        let c = cost_matrix(&tape, &a, &b);
        assert!((c.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_feature_rows_cost_one() {
        let tape = Tape::new();
        let a = Tensor::constant(Value::zeros(vec![1, 4]));
        let b = Tensor::constant(Value::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]));
        let c = cost_matrix(&tape, &a, &b);
        assert_eq!(c.data()[0], 1.0);
    }

    #[test]
    fn displacement_gate_cuts_at_d_max() {
        let pc_t = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let pc_t1 = PointCloud::new(vec![[11.0, 0.0, 0.0], [9.0, 0.0, 0.0]]);
        let mask = distance_mask(&pc_t, &pc_t1, 10.0);
        assert_eq!(mask, vec![false, true]);
        let cost = Value::zeros(vec![1, 2]);
        let plan = sinkhorn(&cost, &mask, 1.0, 1.0, 1, &[1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(plan.plan.data()[0], 0.0);
        assert!(plan.plan.data()[1] > 0.0);
    }

    #[test]
    fn zero_cost_two_by_two_gives_exact_quarter_plan() {
        let cost = Value::zeros(vec![2, 2]);
        let plan = sinkhorn(&cost, &full_mask(2, 2), 1.0, 1.0, 1, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(plan.plan.data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn converged_balanced_plan_matches_lp_assignment() {
        let cost = random_cost(5, 42);
        let mu = uniform_weights(5);
        let plan = sinkhorn(&cost, &full_mask(5, 5), 0.005, 1.0, 1000, &mu, &mu).unwrap();
        let (sigma, _) = lp_assignment_oracle(&cost, &full_mask(5, 5)).unwrap();
        let mass: f64 = sigma.iter().enumerate().map(|(i, &j)| plan.plan.at(i, j)).sum();
        assert!(mass > 0.95, "optimal-permutation mass {mass}");
    }

    #[test]
    fn balanced_marginals_converge() {
        let cost = random_cost(6, 7);
        let mu = uniform_weights(6);
        let plan = sinkhorn(&cost, &full_mask(6, 6), 0.1, 1.0, 600, &mu, &mu).unwrap();
        let t = plan.plan.data();
        let mut l1_rows = 0.0;
        let mut l1_cols = 0.0;
        for i in 0..6 {
            let r: f64 = (0..6).map(|j| t[i * 6 + j]).sum();
            let c: f64 = (0..6).map(|j| t[j * 6 + i]).sum();
            l1_rows += (r - mu[i]).abs();
            l1_cols += (c - mu[i]).abs();
        }
        assert!(l1_rows < 1e-6 && l1_cols < 1e-6, "rows {l1_rows} cols {l1_cols}");
    }

    #[test]
    fn masked_pairs_carry_exactly_zero_mass() {
        let cost = random_cost(4, 9);
        let mut mask = full_mask(4, 4);
        mask[1] = false;
        mask[10] = false;
        let mu = uniform_weights(4);
        let plan = sinkhorn(&cost, &mask, 0.5, 0.7, 50, &mu, &mu).unwrap();
        assert_eq!(plan.plan.data()[1], 0.0);
        assert_eq!(plan.plan.data()[10], 0.0);
    }

    #[test]
    fn all_masked_is_a_no_correspondence_error() {
        let cost = Value::zeros(vec![2, 2]);
        match sinkhorn(&cost, &[false; 4], 1.0, 1.0, 1, &[0.5, 0.5], &[0.5, 0.5]) {
            Err(FlowError::NoCorrespondence) => {}
            other => panic!("expected NoCorrespondence, got {other:?}"),
        }
    }

    #[test]
    fn entropy_shrinks_as_epsilon_shrinks() {
        let cost = random_cost(5, 11);
        let mu = uniform_weights(5);
        let entropy = |eps: f64| -> f64 {
            let p = sinkhorn(&cost, &full_mask(5, 5), eps, 1.0, 2000, &mu, &mu).unwrap();
            -p.plan.data().iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum::<f64>()
        };
        let (h1, h2, h3) = (entropy(0.5), entropy(0.05), entropy(0.005));
        assert!(h1 >= h2 && h2 >= h3, "{h1} {h2} {h3}");
    }

    #[test]
    fn self_match_gives_zero_flow() {
        let tape = Tape::new();
        let cloud = PointCloud::new(vec![[1.0, 0.0, 2.0], [0.0, 1.0, 3.0]]);
        let plan = Tensor::constant(Value::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]));
        let (flow, matched) = initial_flow(&tape, &plan, &cloud, &cloud);
        assert!(flow.data().iter().all(|&v| v == 0.0));
        assert_eq!(matched, vec![true, true]);
    }

    #[test]
    fn diagonal_plan_recovers_translation() {
        let tape = Tape::new();
        let pc_t = PointCloud::new(vec![[0.0, 0.0, 1.0], [1.0, 1.0, 2.0], [2.0, 0.0, 3.0]]);
        let pc_t1 = PointCloud::new(pc_t.points().iter().map(|p| [p[0] + 1.0, p[1], p[2]]).collect());
        let plan = Tensor::constant(Value::new(
            vec![3, 3],
            vec![0.3, 0.0, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.3],
        ));
        let (flow, _) = initial_flow(&tape, &plan, &pc_t, &pc_t1);
        for i in 0..3 {
            assert!((flow.at(i, 0) - 1.0).abs() < 1e-9);
            assert!(flow.at(i, 1).abs() < 1e-9);
            assert!(flow.at(i, 2).abs() < 1e-9);
        }
    }

    #[test]
    fn flow_is_invariant_to_plan_scale() {
        let tape = Tape::new();
        let pc_t = PointCloud::new(vec![[0.0, 0.0, 1.0], [1.0, 0.0, 2.0]]);
        let pc_t1 = PointCloud::new(vec![[0.5, 0.2, 1.1], [1.5, -0.1, 2.2]]);
        let p = Value::new(vec![2, 2], vec![0.4, 0.1, 0.2, 0.3]);
        let scaled = Value::new(vec![2, 2], p.data().iter().map(|v| v * 7.3).collect());
        let (f1, _) = initial_flow(&tape, &Tensor::constant(p), &pc_t, &pc_t1);
        let (f2, _) = initial_flow(&tape, &Tensor::constant(scaled), &pc_t, &pc_t1);
        for (x, y) in f1.data().iter().zip(f2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unmatched_rows_get_zero_flow_and_flag() {
        let tape = Tape::new();
        let pc_t = PointCloud::new(vec![[5.0, 5.0, 5.0], [0.0, 0.0, 1.0]]);
        let pc_t1 = PointCloud::new(vec![[0.1, 0.0, 1.0]]);
        let plan = Tensor::constant(Value::new(vec![2, 1], vec![0.0, 1.0]));
        let (flow, matched) = initial_flow(&tape, &plan, &pc_t, &pc_t1);
        assert_eq!(matched, vec![false, true]);
        assert_eq!(&flow.data()[0..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn oracle_prefers_zero_diagonal() {
        let cost = Value::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let (sigma, c) = lp_assignment_oracle(&cost, &full_mask(2, 2)).unwrap();
        assert_eq!(sigma, vec![0, 1]);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn oracle_prefers_zero_antidiagonal() {
        let cost = Value::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let (sigma, c) = lp_assignment_oracle(&cost, &full_mask(2, 2)).unwrap();
        assert_eq!(sigma, vec![1, 0]);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn oracle_errors_without_admissible_permutation() {
        let cost = Value::zeros(vec![2, 2]);
        let mask = vec![true, false, true, false]; // both rows need column 0
        match lp_assignment_oracle(&cost, &mask) {
            Err(FlowError::NoAssignment) => {}
            other => panic!("expected NoAssignment, got {other:?}"),
        }
    }

    #[test]
    fn oracle_cost_lower_bounds_plan_support_costs() {
        let cost = random_cost(5, 21);
        let mu = uniform_weights(5);
        let plan = sinkhorn(&cost, &full_mask(5, 5), 0.05, 1.0, 500, &mu, &mu).unwrap();
        let (_, oracle_cost) = lp_assignment_oracle(&cost, &full_mask(5, 5)).unwrap();
        // greedy permutation from the plan's row argmaxes (happens to be valid here)
        let mut perm_cost = 0.0;
        for i in 0..5 {
            let j = (0..5)
                .max_by(|&a, &b| plan.plan.at(i, a).partial_cmp(&plan.plan.at(i, b)).unwrap())
                .unwrap();
            perm_cost += cost.at(i, j);
        }
        assert!(oracle_cost <= perm_cost + 1e-12);
    }

    #[test]
    fn tape_and_plain_solvers_agree() {
        let cost = random_cost(4, 31);
        let mut mask = full_mask(4, 4);
        mask[3] = false;
        let mu = uniform_weights(4);
        let params = OtParams { log_epsilon: -0.4, log_lambda: 0.2, iterations: 3, d_max: 10.0 };
        let plain = sinkhorn(&cost, &mask, params.epsilon(), params.rho(), 3, &mu, &mu).unwrap();
        let tape = Tape::new();
        let le = Tensor::constant_scalar(params.log_epsilon);
        let ll = Tensor::constant_scalar(params.log_lambda);
        let tracked = sinkhorn_tape(&tape, &Tensor::constant(cost), &mask, &le, &ll, 3, &mu, &mu).unwrap();
        for (x, y) in plain.plan.data().iter().zip(tracked.data()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn sinkhorn_gradients_match_finite_differences() {
        let n = 6;
        let mu = uniform_weights(n);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        let mut feats_t = Value::new(vec![n, 5], (0..n * 5).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let feats_t1 = Value::new(vec![n, 5], (0..n * 5).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut logs = [0.1f64, -0.2];
        let mask = full_mask(n, n);

        let eval = |ft: &Value, lg: &[f64; 2]| -> (f64, Vec<f64>, [f64; 2]) {
            let tape = Tape::new();
            let f_t = tape.var(ft);
            let f_t1 = Tensor::constant(feats_t1.clone());
            let le = tape.var(&Value::scalar(lg[0]));
            let ll = tape.var(&Value::scalar(lg[1]));
            let cost = cost_matrix(&tape, &f_t, &f_t1);
            let plan = sinkhorn_tape(&tape, &cost, &mask, &le, &ll, 1, &mu, &mu).unwrap();
            let probe = Tensor::constant(Value::new(
                vec![n * n, 1],
                (0..n * n).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect(),
            ));
            let loss = tape.sum(&tape.matmul(&tape.reshape(&plan, vec![1, n * n]), &probe));
            let g = tape.backward(&loss);
            (
                loss.item(),
                g.wrt(&f_t).unwrap().to_vec(),
                [g.wrt(&le).unwrap()[0], g.wrt(&ll).unwrap()[0]],
            )
        };

        let (_, gf, gl) = eval(&feats_t, &logs);
        let h = 1e-6;
        for idx in [0, 7, 14, 29] {
            let orig = feats_t.data()[idx];
            feats_t.data_mut()[idx] = orig + h;
            let (fp, _, _) = eval(&feats_t, &logs);
            feats_t.data_mut()[idx] = orig - h;
            let (fm, _, _) = eval(&feats_t, &logs);
            feats_t.data_mut()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = gf[idx].abs().max(fd.abs()).max(1e-8);
            assert!(((gf[idx] - fd) / denom).abs() < 1e-4, "feat {idx}: {} vs {fd}", gf[idx]);
        }
        for s in 0..2 {
            let orig = logs[s];
            logs[s] = orig + h;
            let (fp, _, _) = eval(&feats_t, &logs);
            logs[s] = orig - h;
            let (fm, _, _) = eval(&feats_t, &logs);
            logs[s] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = gl[s].abs().max(fd.abs()).max(1e-8);
            assert!(((gl[s] - fd) / denom).abs() < 1e-4, "log {s}: {} vs {fd}", gl[s]);
        }
    }

    #[test]
    fn rho_stays_in_open_unit_interval() {
        for (le, ll) in [(0.0, 0.0), (-3.0, 4.0), (5.0, -5.0)] {
            let p = OtParams { log_epsilon: le, log_lambda: ll, ..Default::default() };
            let r = p.rho();
            assert!(r > 0.0 && r < 1.0, "rho {r}");
        }
    }
}
