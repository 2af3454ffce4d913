//! Finite-difference check of every differentiable operation.

use std::time::Instant;

use actpatch::gradsuite::{grad_suite_tsv, run_grad_suite};

fn main() -> actpatch::Result<()> {
    let start = Instant::now();
    let checks = run_grad_suite(1)?;
    print!("{}", grad_suite_tsv(&checks));
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} ops, {failed} failing, {:.1}s", checks.len(), start.elapsed().as_secs_f64());
    Ok(())
}
