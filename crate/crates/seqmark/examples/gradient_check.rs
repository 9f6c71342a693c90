//! Verifies analytic gradients against central finite differences, one
//! parameter group at a time, on a configuration small enough to finish in
//! seconds.
//!
//! Run with: `cargo run --release --example gradient_check`

use seqmark::config::ModelConfig;
use seqmark::model::run_gradcheck;

fn main() -> seqmark::Result<()> {
    let config = ModelConfig::gradcheck_desk();
    let report = run_gradcheck(&config, 0)?;

    println!("{:<24}  max relative error", "parameter group");
    for group in &report.groups {
        println!("{:<24}  {:.3e}", group.name, group.max_rel_err);
    }
    let worst = report.worst_group().expect("model has parameters");
    println!(
        "\n{} groups checked; worst is {} at {:.3e}",
        report.groups.len(),
        worst.name,
        worst.max_rel_err
    );
    Ok(())
}
