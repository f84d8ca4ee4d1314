//! Acceptance suite: one pass/fail line per criterion.

mod common;

use std::process::ExitCode;

type Criterion = (&'static str, &'static str, fn() -> common::Check);

fn main() -> ExitCode {
    let checks: [Criterion; 8] = [
        ("AC1", "metric oracles", common::metric_oracles),
        ("AC2", "oracle equivalence", || common::oracle_equivalence(500, 0x5eed)),
        ("AC3", "extraction corpus", common::extraction_corpus),
        ("AC4", "end-to-end generation run", common::generation_run),
        ("AC5", "ppl mode", common::ppl_mode),
        ("AC6", "concurrency contract", || common::concurrency_contract(100, 4, 7)),
        ("AC7", "wire-format goldens", common::wire_goldens),
        ("AC8", "schema round-trip", || common::schema_round_trip(200, 0xda7a)),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("{id} [PRIMARY] {name}: PASS ({detail})"),
            Ok(Err(reason)) => {
                failed += 1;
                println!("{id} [PRIMARY] {name}: FAIL ({reason})");
            }
            Err(_) => {
                failed += 1;
                println!("{id} [PRIMARY] {name}: FAIL (panicked)");
            }
        }
    }
    println!("acceptance: {}/{} passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
