//! Analytic gradients of every tape op against central finite differences
//! (64-bit) over 20 seeds.

use flowmac_tensor::gradcheck::{check_case, op_cases, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in op_cases() {
        let report = check_case(&case, 20).expect("forward");
        println!("gradcheck {:<14} {:>5} entries, worst rel err {:.2e}", report.name, report.entries, report.worst);
        if let Some(f) = report.failure {
            failures.push(format!("{}: {f}", report.name));
        }
    }
    assert!(failures.is_empty(), "over tolerance {TOLERANCE}:\n{}", failures.join("\n"));
}
