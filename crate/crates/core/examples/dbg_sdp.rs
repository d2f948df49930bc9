use consensus_sos::poly::{Monomial, Parity, Polynomial};
use consensus_sos::sdp::*;
use consensus_sos::sos::*;

fn main() {
    let x1 = Polynomial::variable(2, 0);
    let x2 = Polynomial::variable(2, 1);
    let s = x1.add(&x2).unwrap();
    let p = s.mul(&s).unwrap();
    let dp = DecisionPoly::from_poly(&p);
    let mut prog = SosProgram::new();
    prog.add_sos(&dp, &monomial_basis(2, 2, Parity::Any)).unwrap();
    let problem = prog.build();
    println!("{}", problem.dump());
    let (sol, trace) = solve_traced(&problem, &SdpSettings::default()).unwrap();
    println!("status {:?} iters {}", sol.status, sol.iterations);
    for (k, it) in trace.iterations.iter().enumerate() {
        println!("{k:3} mu={:9.2e} step={:8.2e} rp={:9.2e} rd={:9.2e} gap={:9.2e}",
            it.mu, it.step, it.rel_primal, it.rel_dual, it.rel_gap);
    }
    let by: f64 = problem.rows.iter().zip(&sol.dual_values).map(|(r, y)| r.rhs * y).sum();
    println!("b'y = {by}");
    let _ = Monomial::one(2);
}
