//! Wall-clock comparison of MAML, FOMAML, and ANIL on pre-generated
//! episodes. ANIL's head-only inner loop cuts both training and inference
//! cost.

use metalab::algos::Variant;
use metalab::harness::{timing_bench, Config};

fn main() {
    let cfg = Config { filters: 4, inner_steps_eval: 5, ..Config::default() };
    let variants = [Variant::Maml, Variant::Fomaml, Variant::Anil];
    println!("timing 200 iterations per variant (episodes generated up front)...");
    let table = timing_bench(&variants, &cfg, 200).unwrap();
    assert_eq!(table.renders_during_timing, 0, "no data generation inside timed regions");
    println!(
        "{:<8} {:>12} {:>12} {:>10} {:>10}",
        "variant", "train ms", "infer ms", "train x", "infer x"
    );
    for r in &table.rows {
        println!(
            "{:<8} {:>12.3} {:>12.3} {:>10.2} {:>10.2}",
            r.variant.name(),
            r.train_mean_ms,
            r.infer_mean_ms,
            r.train_speedup,
            r.infer_speedup
        );
    }
}
