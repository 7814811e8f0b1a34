//! Verify reverse-mode gradients against central finite differences.
//!
//! Runs the full 64-bit check suite — every tensor primitive plus a gated
//! multi-scale block — and prints one line per case.
//!
//!     cargo run --release --example gradcheck

use msnet::checks::{gradient_suite, TOLERANCE};

fn main() -> msnet::Result<()> {
    let cases = gradient_suite(0)?;
    let mut worst = 0.0f64;
    for case in &cases {
        println!(
            "{} {:<28} max relative error {:.3e}",
            if case.passed() { "PASS" } else { "FAIL" },
            case.name,
            case.max_rel_err
        );
        worst = worst.max(case.max_rel_err);
    }
    println!("\nworst case {:.3e} against tolerance {:.0e}", worst, TOLERANCE);
    Ok(())
}
