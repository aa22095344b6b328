//! Central finite-difference check of every differentiable op.
//!
//! cargo run --release --example gradcheck -- [cases]
//! cargo run --release --features f64 --example gradcheck

use mims::gradcheck::run_suite;

fn main() -> mims::Result<()> {
    let cases: usize = std::env::args().nth(1).map_or(20, |s| s.parse().expect("cases"));
    println!("{:<16} {:>13} {:>14} {:>8} {:>8}", "op", "rel error", "max elem error", "checked", "skipped");
    for r in run_suite(cases, 0)? {
        println!(
            "{:<16} {:>13.2e} {:>14.2e} {:>8} {:>8}",
            r.op, r.max_rel_error, r.max_elem_error, r.checked, r.skipped
        );
    }
    Ok(())
}
