//! The bundled reference problem: the published two-dimensional four-follower
//! example with its cyclic 1 kHz switching schedule.

use crate::files::ProblemFile;
use crate::graph::SwitchingSchedule;
use crate::poly::{Polynomial, PolyVector};

/// Raw JSON of the bundled problem file (also shipped at
/// `fixtures/paper_example.json`).
pub const PAPER_EXAMPLE_JSON: &str = include_str!("../fixtures/paper_example.json");

pub fn paper_problem() -> ProblemFile {
    ProblemFile::from_json(PAPER_EXAMPLE_JSON).expect("bundled fixture must parse")
}

/// The quartic Lyapunov function of the reference example.
pub fn paper_v() -> Polynomial {
    paper_problem().v.expect("fixture has v")
}

/// The cubic position-coupling function (odd).
pub fn paper_h1() -> PolyVector {
    PolyVector::new(paper_problem().h1.expect("fixture has h1")).unwrap()
}

/// The cubic velocity-coupling function.
pub fn paper_h2() -> PolyVector {
    PolyVector::new(paper_problem().h2.expect("fixture has h2")).unwrap()
}

/// Three individually disconnected graphs over four followers whose union is
/// connected through the leader, cycling every millisecond.
pub fn reference_schedule() -> SwitchingSchedule {
    paper_problem().schedule.expect("fixture has schedule")
}
