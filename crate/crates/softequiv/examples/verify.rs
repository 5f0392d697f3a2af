//! Run the built-in verification suites (the same ones behind `ser check`).
//!
//!     cargo run -p softequiv --example verify

fn main() {
    let (reports, ok) = softequiv::check::run_all();
    for r in &reports {
        println!(
            "{:<20} {:>6.2}s  {}  {}",
            r.name,
            r.seconds,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    std::process::exit(if ok { 0 } else { 1 });
}
