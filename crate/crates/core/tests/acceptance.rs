//! Acceptance suite: one PASS/FAIL line per criterion, followed by the
//! measured values. Exits nonzero if any criterion fails.

use vecot_core::selftest::run_all;
use vecot_core::Exec;

fn main() {
    let report = run_all(Exec::default());
    for outcome in &report.criteria {
        println!("{}", outcome.summary());
        for line in &outcome.details {
            println!("    {line}");
        }
    }
    let failed = report.criteria.iter().filter(|c| !c.pass).count();
    println!("acceptance: {} passed, {failed} failed", report.criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
