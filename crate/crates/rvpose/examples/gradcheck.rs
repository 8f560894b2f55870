//! Verifies every differentiable primitive and the LSTM cell against
//! central differences: `cargo run --release --example gradcheck`

fn main() {
    let results = rvpose::gradsuite::run_full_suite(5);
    let mut worst = 0.0f64;
    for r in &results {
        println!(
            "{}  {:<28} max rel err {:.3e}",
            if r.passed() { "pass" } else { "FAIL" },
            r.name,
            r.max_rel_err
        );
        worst = worst.max(r.max_rel_err);
    }
    println!(
        "\n{} checks, worst relative error {worst:.3e} (tolerance {:.0e})",
        results.len(),
        rvpose::gradsuite::TOLERANCE
    );
    assert!(results.iter().all(|r| r.passed()));
}
