//! Closed-loop simulation of the distributed protocols under a switching
//! schedule: fixed-step fourth-order Runge-Kutta, per-step tracking-error
//! norms, a switch-event log, and a Lyapunov monitor evaluated along the
//! stored trajectory.
//!
//! Second-order systems are integrated in error coordinates exactly as the
//! error dynamics are written: the position error moves as `h1` of the
//! velocity error, which is not the literal double integrator. Absolute
//! trajectories, when needed, are reconstructed as `z_i = w_i + z_ref(t)`
//! with `z_ref(t) = z_ref(0) + v_ref t`.

use serde::Serialize;
use thiserror::Error;

use crate::graph::{GraphError, SwitchingSchedule, TopologyGraph};
use crate::poly::{PolyError, PolyVector, Polynomial};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("step {dt} does not divide subinterval {index} duration {duration} to an integer step count")]
    Misaligned { dt: f64, index: usize, duration: f64 },
    #[error("state norm exceeded 1e12 at t = {t}: diverged")]
    Diverged { t: f64 },
    #[error("dimension mismatch: {context}")]
    Dimension { context: String },
    #[error("horizon and step must be positive (dt = {dt}, t_final = {t_final})")]
    BadHorizon { dt: f64, t_final: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// States of the single-integrator protocol: one n-vector per follower plus
/// the constant leader reference.
#[derive(Debug, Clone)]
pub struct FirstOrderState {
    pub z: Vec<Vec<f64>>,
    pub z_ref: Vec<f64>,
}

/// Error-coordinate states of the second-order protocol: position errors,
/// velocity errors, and the constant leader velocity.
#[derive(Debug, Clone)]
pub struct SecondOrderErrorState {
    pub omega: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
    pub v_ref: Vec<f64>,
}

/// Protocol right-hand side for first-order agents:
/// `dz_i = sum_j A_ij (h(z_j) - h(z_i)) + d_i (h(z_ref) - h(z_i))`.
pub fn first_order_rhs(
    state: &FirstOrderState,
    graph: &TopologyGraph,
    h: &PolyVector,
) -> Result<Vec<Vec<f64>>, SimError> {
    let n_agents = graph.follower_count();
    if state.z.len() != n_agents {
        return Err(SimError::Dimension {
            context: format!("{} agent states for {} followers", state.z.len(), n_agents),
        });
    }
    let dims = h.len();
    let h_of: Vec<Vec<f64>> =
        state.z.iter().map(|z| h.evaluate(z)).collect::<Result<_, _>>()?;
    let h_ref = h.evaluate(&state.z_ref)?;
    let a = graph.adjacency();
    let d = graph.leader_gains();
    let mut out = vec![vec![0.0; dims]; n_agents];
    for i in 0..n_agents {
        for j in 0..n_agents {
            let w = a[(i, j)];
            if w == 0.0 {
                continue;
            }
            for k in 0..dims {
                out[i][k] += w * (h_of[j][k] - h_of[i][k]);
            }
        }
        if d[i] > 0.0 {
            for k in 0..dims {
                out[i][k] += d[i] * (h_ref[k] - h_of[i][k]);
            }
        }
    }
    Ok(out)
}

/// Error dynamics of the second-order protocol:
/// `dw_i = h1(nu_i)`;
/// `dnu_i = sum_j A_ij h1(w_j - w_i) + d_i h1(-w_i)
///          + sum_j A_ij (h2(v_j) - h2(v_i)) + d_i (h2(v_ref) - h2(v_i))`
/// with `v_j = nu_j + v_ref`.
pub fn second_order_error_rhs(
    state: &SecondOrderErrorState,
    graph: &TopologyGraph,
    h1: &PolyVector,
    h2: &PolyVector,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), SimError> {
    let n_agents = graph.follower_count();
    if state.omega.len() != n_agents || state.nu.len() != n_agents {
        return Err(SimError::Dimension {
            context: format!(
                "{}/{} error states for {} followers",
                state.omega.len(),
                state.nu.len(),
                n_agents
            ),
        });
    }
    let dims = h1.len();
    let a = graph.adjacency();
    let d = graph.leader_gains();

    let v_abs: Vec<Vec<f64>> = state
        .nu
        .iter()
        .map(|nu| nu.iter().zip(&state.v_ref).map(|(x, r)| x + r).collect())
        .collect();
    let h2_of: Vec<Vec<f64>> =
        v_abs.iter().map(|v| h2.evaluate(v)).collect::<Result<_, _>>()?;
    let h2_ref = h2.evaluate(&state.v_ref)?;

    let mut d_omega = vec![vec![0.0; dims]; n_agents];
    let mut d_nu = vec![vec![0.0; dims]; n_agents];
    for i in 0..n_agents {
        d_omega[i] = h1.evaluate(&state.nu[i])?;
        for j in 0..n_agents {
            let w = a[(i, j)];
            if w == 0.0 {
                continue;
            }
            let rel: Vec<f64> = state.omega[j]
                .iter()
                .zip(&state.omega[i])
                .map(|(wj, wi)| wj - wi)
                .collect();
            let h1_rel = h1.evaluate(&rel)?;
            for k in 0..dims {
                d_nu[i][k] += w * (h1_rel[k] + h2_of[j][k] - h2_of[i][k]);
            }
        }
        if d[i] > 0.0 {
            let neg: Vec<f64> = state.omega[i].iter().map(|x| -x).collect();
            let h1_leader = h1.evaluate(&neg)?;
            for k in 0..dims {
                d_nu[i][k] += d[i] * (h1_leader[k] + h2_ref[k] - h2_of[i][k]);
            }
        }
    }
    Ok((d_omega, d_nu))
}

/// The protocol polynomials driving a run.
pub enum SimPolys {
    FirstOrder { h: PolyVector },
    SecondOrder { h1: PolyVector, h2: PolyVector },
}

/// Initial data of a run.
pub enum SimInitial {
    FirstOrder { z: Vec<Vec<f64>>, z_ref: Vec<f64> },
    SecondOrder { omega: Vec<Vec<f64>>, nu: Vec<Vec<f64>>, v_ref: Vec<f64> },
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationResult {
    pub order: u8,
    pub dims: usize,
    pub agents: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    /// Active graph index at each grid point.
    pub graph_log: Vec<usize>,
    /// Per step, per agent: euclidean norm of the position tracking error.
    pub position_error_norms: Vec<Vec<f64>>,
    /// Per step, per agent: velocity error norms (second order only).
    pub velocity_error_norms: Vec<Vec<f64>>,
    /// Switch events: (time, new graph index), excluding t = 0.
    pub switch_events: Vec<(f64, usize)>,
    /// Raw state log: first order stores the absolute z per agent; second
    /// order stores omega then nu per agent, concatenated.
    pub states: Vec<Vec<f64>>,
    /// Leader reference: z_ref for first order, v_ref for second order.
    pub reference: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Integer steps per subinterval; errors out when `dt` does not align.
fn steps_per_subinterval(schedule: &SwitchingSchedule, dt: f64) -> Result<Vec<usize>, SimError> {
    let mut out = Vec::with_capacity(schedule.subintervals().len());
    for (index, &(_, duration)) in schedule.subintervals().iter().enumerate() {
        let ratio = duration / dt;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * steps.max(1.0) {
            return Err(SimError::Misaligned { dt, index, duration });
        }
        out.push(steps as usize);
    }
    Ok(out)
}

/// Classic fourth-order Runge-Kutta over the switching schedule. The active
/// graph is re-read at every step start and, by the alignment precondition,
/// never changes mid-step.
pub fn integrate(
    schedule: &SwitchingSchedule,
    initial: &SimInitial,
    polys: &SimPolys,
    dt: f64,
    t_final: f64,
) -> Result<SimulationResult, SimError> {
    if !(dt > 0.0) || !(t_final > 0.0) {
        return Err(SimError::BadHorizon { dt, t_final });
    }
    let steps_per = steps_per_subinterval(schedule, dt)?;
    let period_steps: usize = steps_per.iter().sum();
    let mut cum_steps = Vec::with_capacity(steps_per.len() + 1);
    cum_steps.push(0usize);
    for &s in &steps_per {
        cum_steps.push(cum_steps.last().unwrap() + s);
    }
    let total_steps = (t_final / dt).round() as usize;
    let n_agents = schedule.follower_count();

    // Flatten the state; the rhs closures unflatten per call.
    let (order, dims, mut flat): (u8, usize, Vec<f64>) = match initial {
        SimInitial::FirstOrder { z, z_ref } => {
            let dims = z_ref.len();
            check_shapes(z, n_agents, dims)?;
            (1, dims, z.iter().flatten().copied().collect())
        }
        SimInitial::SecondOrder { omega, nu, v_ref } => {
            let dims = v_ref.len();
            check_shapes(omega, n_agents, dims)?;
            check_shapes(nu, n_agents, dims)?;
            let mut f: Vec<f64> = omega.iter().flatten().copied().collect();
            f.extend(nu.iter().flatten().copied());
            (2, dims, f)
        }
    };
    match (order, polys) {
        (1, SimPolys::FirstOrder { h }) if h.len() == dims => {}
        (2, SimPolys::SecondOrder { h1, h2 }) if h1.len() == dims && h2.len() == dims => {}
        _ => {
            return Err(SimError::Dimension {
                context: "protocol polynomials do not match the initial state".into(),
            })
        }
    }

    let rhs = |flat: &[f64], graph: &TopologyGraph| -> Result<Vec<f64>, SimError> {
        match polys {
            SimPolys::FirstOrder { h } => {
                let state = FirstOrderState {
                    z: unflatten(flat, n_agents, dims),
                    z_ref: match initial {
                        SimInitial::FirstOrder { z_ref, .. } => z_ref.clone(),
                        _ => unreachable!(),
                    },
                };
                Ok(first_order_rhs(&state, graph, h)?.into_iter().flatten().collect())
            }
            SimPolys::SecondOrder { h1, h2 } => {
                let half = n_agents * dims;
                let state = SecondOrderErrorState {
                    omega: unflatten(&flat[..half], n_agents, dims),
                    nu: unflatten(&flat[half..], n_agents, dims),
                    v_ref: match initial {
                        SimInitial::SecondOrder { v_ref, .. } => v_ref.clone(),
                        _ => unreachable!(),
                    },
                };
                let (dw, dn) = second_order_error_rhs(&state, graph, h1, h2)?;
                let mut out: Vec<f64> = dw.into_iter().flatten().collect();
                out.extend(dn.into_iter().flatten());
                Ok(out)
            }
        }
    };

    let reference = match initial {
        SimInitial::FirstOrder { z_ref, .. } => z_ref.clone(),
        SimInitial::SecondOrder { v_ref, .. } => v_ref.clone(),
    };
    let mut result = SimulationResult {
        order,
        dims,
        agents: n_agents,
        dt,
        times: Vec::with_capacity(total_steps + 1),
        graph_log: Vec::with_capacity(total_steps + 1),
        position_error_norms: Vec::with_capacity(total_steps + 1),
        velocity_error_norms: Vec::with_capacity(total_steps + 1),
        switch_events: Vec::new(),
        states: Vec::with_capacity(total_steps + 1),
        reference,
    };

    // Active graph from integer step counts (the float graph_at query must
    // agree; the tests cross-check).
    let graph_index_at_step = |k: usize| -> usize {
        let r = k % period_steps;
        let sub = match cum_steps.binary_search(&r) {
            Ok(pos) => pos.min(steps_per.len() - 1),
            Err(pos) => pos - 1,
        };
        schedule.subintervals()[sub].0
    };

    let mut last_graph = usize::MAX;
    for k in 0..=total_steps {
        let t = k as f64 * dt;
        let gi = graph_index_at_step(k);
        result.times.push(t);
        result.graph_log.push(gi);
        if k > 0 && gi != last_graph {
            result.switch_events.push((t, gi));
        }
        last_graph = gi;

        record_errors(&mut result, &flat, initial, n_agents, dims);
        result.states.push(flat.clone());

        if k == total_steps {
            break;
        }
        let state_norm = norm(&flat);
        if !state_norm.is_finite() || state_norm > 1e12 {
            return Err(SimError::Diverged { t });
        }

        let graph = schedule.graph(gi);
        let k1 = rhs(&flat, graph)?;
        let k2 = rhs(&add_scaled(&flat, &k1, 0.5 * dt), graph)?;
        let k3 = rhs(&flat.iter().zip(&k2).map(|(x, d)| x + 0.5 * dt * d).collect::<Vec<_>>(), graph)?;
        let k4 = rhs(&flat.iter().zip(&k3).map(|(x, d)| x + dt * d).collect::<Vec<_>>(), graph)?;
        for i in 0..flat.len() {
            flat[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    Ok(result)
}

fn add_scaled(x: &[f64], d: &[f64], s: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + s * b).collect()
}

fn check_shapes(v: &[Vec<f64>], agents: usize, dims: usize) -> Result<(), SimError> {
    if v.len() != agents || v.iter().any(|x| x.len() != dims) {
        return Err(SimError::Dimension {
            context: format!("expected {agents} states of dimension {dims}"),
        });
    }
    Ok(())
}

fn unflatten(flat: &[f64], agents: usize, dims: usize) -> Vec<Vec<f64>> {
    (0..agents).map(|i| flat[i * dims..(i + 1) * dims].to_vec()).collect()
}

fn record_errors(
    result: &mut SimulationResult,
    flat: &[f64],
    initial: &SimInitial,
    agents: usize,
    dims: usize,
) {
    match initial {
        SimInitial::FirstOrder { z_ref, .. } => {
            let z = unflatten(flat, agents, dims);
            let errs: Vec<f64> = z
                .iter()
                .map(|zi| {
                    norm(&zi.iter().zip(z_ref).map(|(a, b)| a - b).collect::<Vec<_>>())
                })
                .collect();
            result.position_error_norms.push(errs);
            result.velocity_error_norms.push(Vec::new());
        }
        SimInitial::SecondOrder { .. } => {
            let half = agents * dims;
            let omega = unflatten(&flat[..half], agents, dims);
            let nu = unflatten(&flat[half..], agents, dims);
            result.position_error_norms.push(omega.iter().map(|w| norm(w)).collect());
            result.velocity_error_norms.push(nu.iter().map(|v| norm(v)).collect());
        }
    }
}

/// Lyapunov monitor along a stored run.
///
/// First order: `sum_i V(z_i - z_ref) - N V(0)`, graph-independent. Second
/// order: `1/2 sum_ij A_ij V0(w_j - w_i) + sum_i d_i V0(w_i) + sum_i V0(nu_i)`
/// with `V0 = V - V(0)`, evaluated with the graph active at each instant; it
/// can jump at switch instants because the weights change.
pub fn lyapunov_trace(
    result: &SimulationResult,
    v: &Polynomial,
    schedule: &SwitchingSchedule,
) -> Result<Vec<f64>, SimError> {
    let dims = result.dims;
    if v.vars() != dims {
        return Err(SimError::Dimension {
            context: format!("V has {} variables, states have {}", v.vars(), dims),
        });
    }
    let v0 = v.evaluate(&vec![0.0; dims])?;
    let agents = result.agents;
    let mut out = Vec::with_capacity(result.states.len());
    for (step, flat) in result.states.iter().enumerate() {
        let value = match result.order {
            1 => {
                let z = unflatten(flat, agents, dims);
                let mut acc = 0.0;
                for zi in &z {
                    let err: Vec<f64> =
                        zi.iter().zip(&result.reference).map(|(a, b)| a - b).collect();
                    acc += v.evaluate(&err)? - v0;
                }
                acc
            }
            _ => {
                let half = agents * dims;
                let omega = unflatten(&flat[..half], agents, dims);
                let nu = unflatten(&flat[half..], agents, dims);
                let graph = schedule.graph(result.graph_log[step]);
                let a = graph.adjacency();
                let d = graph.leader_gains();
                let mut acc = 0.0;
                for i in 0..agents {
                    for j in 0..agents {
                        let w = a[(i, j)];
                        if w == 0.0 {
                            continue;
                        }
                        let rel: Vec<f64> =
                            omega[j].iter().zip(&omega[i]).map(|(a, b)| a - b).collect();
                        acc += 0.5 * w * (v.evaluate(&rel)? - v0);
                    }
                    if d[i] > 0.0 {
                        acc += d[i] * (v.evaluate(&omega[i])? - v0);
                    }
                    acc += v.evaluate(&nu[i])? - v0;
                }
                acc
            }
        };
        out.push(value);
    }
    Ok(out)
}

/// Earliest grid time after which every recorded error norm stays within
/// `epsilon`; `None` if that never happens.
pub fn consensus_time(result: &SimulationResult, epsilon: f64) -> Option<f64> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let steps = result.times.len();
    let ok = |k: usize| -> bool {
        result.position_error_norms[k].iter().all(|&e| e <= epsilon)
            && result.velocity_error_norms[k].iter().all(|&e| e <= epsilon)
    };
    let mut first_bad_after = None;
    for k in (0..steps).rev() {
        if !ok(k) {
            first_bad_after = Some(k);
            break;
        }
    }
    match first_bad_after {
        None => Some(result.times[0]),
        Some(k) if k + 1 < steps => Some(result.times[k + 1]),
        Some(_) => None,
    }
}

/// Deterministic trajectory CSV: `t, pos_err_1..N, [vel_err_1..N,] lyap,
/// graph_index`, one row per step, fixed-precision scientific notation.
pub fn write_csv<W: std::io::Write>(
    result: &SimulationResult,
    lyap: &[f64],
    mut w: W,
) -> std::io::Result<()> {
    let n = result.agents;
    let mut header = String::from("t");
    for i in 1..=n {
        header.push_str(&format!(",pos_err_{i}"));
    }
    if result.order == 2 {
        for i in 1..=n {
            header.push_str(&format!(",vel_err_{i}"));
        }
    }
    header.push_str(",lyap,graph_index");
    writeln!(w, "{header}")?;
    for k in 0..result.times.len() {
        let mut line = format!("{:.9e}", result.times[k]);
        for e in &result.position_error_norms[k] {
            line.push_str(&format!(",{e:.12e}"));
        }
        if result.order == 2 {
            for e in &result.velocity_error_norms[k] {
                line.push_str(&format!(",{e:.12e}"));
            }
        }
        let l = lyap.get(k).copied().unwrap_or(0.0);
        line.push_str(&format!(",{l:.12e},{}", result.graph_log[k]));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::poly::Monomial;

    fn identity(n: usize) -> PolyVector {
        PolyVector::new((0..n).map(|i| Polynomial::variable(n, i)).collect()).unwrap()
    }

    fn single_leader_schedule() -> SwitchingSchedule {
        let g = TopologyGraph::from_edges(1, &[], vec![1.0]).unwrap();
        SwitchingSchedule::new(vec![g], vec![(0, 1e-3)], vec![0], 1e-3).unwrap()
    }

    #[test]
    fn consensus_is_an_equilibrium() {
        let s = fixtures::reference_schedule();
        let h = identity(2);
        let z_ref = vec![1.0, 1.5];
        let state =
            FirstOrderState { z: vec![z_ref.clone(); 4], z_ref: z_ref.clone() };
        for g in s.graphs() {
            let dz = first_order_rhs(&state, g, &h).unwrap();
            assert!(dz.iter().flatten().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn scalar_leader_tracking_rhs() {
        // N = 1, d1 = 1, h(z) = z, z_ref = 0: dz = -z.
        let g = TopologyGraph::from_edges(1, &[], vec![1.0]).unwrap();
        let state = FirstOrderState { z: vec![vec![2.5]], z_ref: vec![0.0] };
        let dz = first_order_rhs(&state, &g, &identity(1)).unwrap();
        assert_eq!(dz[0][0], -2.5);
    }

    #[test]
    fn two_agent_rhs() {
        // N = 2, edge weight 1, no leader, scalar states (1, 0): dz = (-1, 1).
        let g = TopologyGraph::from_edges(2, &[(0, 1, 1.0)], vec![0.0, 0.0]).unwrap();
        let state = FirstOrderState { z: vec![vec![1.0], vec![0.0]], z_ref: vec![0.0] };
        let dz = first_order_rhs(&state, &g, &identity(1)).unwrap();
        assert_eq!(dz[0][0], -1.0);
        assert_eq!(dz[1][0], 1.0);
    }

    #[test]
    fn second_order_equilibrium_and_damped_oscillator() {
        let g = TopologyGraph::from_edges(1, &[], vec![1.0]).unwrap();
        let h = identity(1);
        let zero = SecondOrderErrorState {
            omega: vec![vec![0.0]],
            nu: vec![vec![0.0]],
            v_ref: vec![0.0],
        };
        let (dw, dn) = second_order_error_rhs(&zero, &g, &h, &h).unwrap();
        assert!(dw[0][0] == 0.0 && dn[0][0] == 0.0);

        // omega' = nu, nu' = -omega - nu.
        let st = SecondOrderErrorState {
            omega: vec![vec![0.7]],
            nu: vec![vec![-0.2]],
            v_ref: vec![0.0],
        };
        let (dw, dn) = second_order_error_rhs(&st, &g, &h, &h).unwrap();
        assert!((dw[0][0] - (-0.2)).abs() < 1e-15);
        assert!((dn[0][0] - (-0.7 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn leader_term_uses_oddness() {
        // The leader contribution to dnu equals -d_i h1(w_i) for odd h1.
        let g = TopologyGraph::from_edges(1, &[], vec![2.0]).unwrap();
        let cubic = PolyVector::new(vec![Polynomial::from_monomial(Monomial::new(vec![3]), 1.0)])
            .unwrap();
        let st = SecondOrderErrorState {
            omega: vec![vec![0.5]],
            nu: vec![vec![0.0]],
            v_ref: vec![0.0],
        };
        let (_, dn) = second_order_error_rhs(&st, &g, &cubic, &identity(1)).unwrap();
        let expected = -2.0 * 0.5f64.powi(3);
        assert!((dn[0][0] - expected).abs() < 1e-15);
    }

    #[test]
    fn equilibrium_preserved_over_many_steps() {
        let s = fixtures::reference_schedule();
        let initial = SimInitial::SecondOrder {
            omega: vec![vec![0.0; 2]; 4],
            nu: vec![vec![0.0; 2]; 4],
            v_ref: vec![0.0, 0.5],
        };
        let polys =
            SimPolys::SecondOrder { h1: fixtures::paper_h1(), h2: fixtures::paper_h2() };
        let r = integrate(&s, &initial, &polys, 1e-4, 1.0).unwrap();
        assert_eq!(r.times.len(), 10_001);
        for k in [0, 5000, 10_000] {
            assert!(r.position_error_norms[k].iter().all(|&e| e < 1e-12));
            assert!(r.velocity_error_norms[k].iter().all(|&e| e < 1e-12));
        }
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        // Scalar leader tracking: z' = -z, z(0) = 1: z(1) = e^-1.
        let s = single_leader_schedule();
        let initial = SimInitial::FirstOrder { z: vec![vec![1.0]], z_ref: vec![0.0] };
        let polys = SimPolys::FirstOrder { h: identity(1) };
        let r = integrate(&s, &initial, &polys, 1e-3, 1.0).unwrap();
        let z_end = r.position_error_norms.last().unwrap()[0];
        assert!((z_end - (-1.0f64).exp()).abs() < 1e-9, "z(1) = {z_end}");
    }

    #[test]
    fn rk4_order_against_closed_form() {
        // Halving dt shrinks the error ~16x.
        let s = single_leader_schedule();
        let polys = SimPolys::FirstOrder { h: identity(1) };
        let run = |dt: f64| -> f64 {
            let initial = SimInitial::FirstOrder { z: vec![vec![1.0]], z_ref: vec![0.0] };
            let r = integrate(&s, &initial, &polys, dt, 1.0).unwrap();
            (r.position_error_norms.last().unwrap()[0] - (-1.0f64).exp()).abs()
        };
        // Steps must divide the 1 ms subinterval.
        let e1 = run(5e-4);
        let e2 = run(2.5e-4);
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "order ratio {ratio}");
    }

    #[test]
    fn misaligned_dt_rejected() {
        let s = single_leader_schedule();
        let initial = SimInitial::FirstOrder { z: vec![vec![1.0]], z_ref: vec![0.0] };
        let polys = SimPolys::FirstOrder { h: identity(1) };
        assert!(matches!(
            integrate(&s, &initial, &polys, 3e-4, 1.0),
            Err(SimError::Misaligned { .. })
        ));
    }

    #[test]
    fn divergence_detected() {
        // z' = +z^3 with an anti-dissipative coupling blows up.
        let s = single_leader_schedule();
        let cubic = PolyVector::new(vec![Polynomial::from_monomial(Monomial::new(vec![3]), -1e9)])
            .unwrap();
        let initial = SimInitial::FirstOrder { z: vec![vec![10.0]], z_ref: vec![0.0] };
        let polys = SimPolys::FirstOrder { h: cubic };
        assert!(matches!(
            integrate(&s, &initial, &polys, 1e-3, 5.0),
            Err(SimError::Diverged { .. })
        ));
    }

    #[test]
    fn switch_log_matches_graph_at() {
        let s = fixtures::reference_schedule();
        let initial = SimInitial::SecondOrder {
            omega: vec![vec![0.1; 2]; 4],
            nu: vec![vec![0.0; 2]; 4],
            v_ref: vec![0.0, 0.5],
        };
        let polys =
            SimPolys::SecondOrder { h1: fixtures::paper_h1(), h2: fixtures::paper_h2() };
        let r = integrate(&s, &initial, &polys, 1e-4, 0.05).unwrap();
        for (k, &t) in r.times.iter().enumerate() {
            assert_eq!(r.graph_log[k], s.graph_at(t).unwrap(), "step {k} at t = {t}");
        }
        // Switches land exactly on the schedule boundaries.
        for &(t, _) in &r.switch_events {
            let in_period = t % s.period();
            let on_boundary = (in_period % 1e-3).abs() < 1e-12
                || ((in_period % 1e-3) - 1e-3).abs() < 1e-12;
            assert!(on_boundary, "switch at t = {t}");
        }
    }

    #[test]
    fn lyapunov_trace_closed_form() {
        // Scalar tracking with V = z^2: trace(t) = e^{-2t}.
        let s = single_leader_schedule();
        let initial = SimInitial::FirstOrder { z: vec![vec![1.0]], z_ref: vec![0.0] };
        let polys = SimPolys::FirstOrder { h: identity(1) };
        let r = integrate(&s, &initial, &polys, 1e-3, 1.0).unwrap();
        let v = Polynomial::from_monomial(Monomial::new(vec![2]), 1.0);
        let trace = lyapunov_trace(&r, &v, &s).unwrap();
        for (k, &t) in r.times.iter().enumerate() {
            let expect = (-2.0 * t).exp();
            assert!((trace[k] - expect).abs() < 1e-8, "t = {t}: {} vs {expect}", trace[k]);
        }
        // Zero-error run: identically zero.
        let initial0 = SimInitial::FirstOrder { z: vec![vec![0.0]], z_ref: vec![0.0] };
        let r0 = integrate(&s, &initial0, &polys, 1e-3, 0.1).unwrap();
        let trace0 = lyapunov_trace(&r0, &v, &s).unwrap();
        assert!(trace0.iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn consensus_time_examples() {
        let s = single_leader_schedule();
        let polys = SimPolys::FirstOrder { h: identity(1) };
        // Zero-error run: time 0.
        let r0 = integrate(
            &s,
            &SimInitial::FirstOrder { z: vec![vec![0.0]], z_ref: vec![0.0] },
            &polys,
            1e-3,
            0.1,
        )
        .unwrap();
        assert_eq!(consensus_time(&r0, 1e-6), Some(0.0));
        // Exponential decay: reaches e^-1 at t = 1 within one step.
        let r = integrate(
            &s,
            &SimInitial::FirstOrder { z: vec![vec![1.0]], z_ref: vec![0.0] },
            &polys,
            1e-3,
            2.0,
        )
        .unwrap();
        let t = consensus_time(&r, (-1.0f64).exp()).unwrap();
        assert!((t - 1.0).abs() <= 1e-3 + 1e-12, "consensus time {t}");
        // Never-converging threshold.
        assert_eq!(consensus_time(&r, 1e-16), None);
    }

    #[test]
    fn csv_is_deterministic() {
        let s = single_leader_schedule();
        let polys = SimPolys::FirstOrder { h: identity(1) };
        let r = integrate(
            &s,
            &SimInitial::FirstOrder { z: vec![vec![1.0]], z_ref: vec![0.0] },
            &polys,
            1e-3,
            0.01,
        )
        .unwrap();
        let v = Polynomial::from_monomial(Monomial::new(vec![2]), 1.0);
        let trace = lyapunov_trace(&r, &v, &s).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv(&r, &trace, &mut a).unwrap();
        write_csv(&r, &trace, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("t,pos_err_1,lyap,graph_index\n"));
    }
}
