//! Finite-difference gradient suite; pass a substring to filter cases.

use dimr::gradsuite;

fn main() -> dimr::Result<()> {
    let filter = std::env::args().nth(1);
    let reports = gradsuite::run(0, |n| filter.as_deref().is_none_or(|f| n.contains(f)))?;
    for r in &reports {
        println!("{} {:<24} {:.2e} (tol {:.0e})", if r.passed() { "ok  " } else { "FAIL" }, r.name, r.max_rel_err, r.tolerance);
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{}/{} passed", reports.len() - failed, reports.len());
    Ok(())
}
