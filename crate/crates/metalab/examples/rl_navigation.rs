//! Meta-RL on 2D navigation: a Gaussian policy meta-trained with MAML-style
//! policy gradients reaches new goals after one adaptation step.

use metalab::algos::Variant;
use metalab::metarl::{self, NavConfig, RlTrainConfig};
use metalab::model::MlpConfig;

fn main() {
    let mlp = MlpConfig { input_dim: 2, hidden: vec![32, 32], output_dim: 2 };
    let nav = NavConfig::default();
    for variant in [Variant::Maml, Variant::Anil] {
        let cfg = RlTrainConfig {
            iterations: 60,
            task_batch: 5,
            n_traj: 10,
            ..RlTrainConfig::desk_default(variant)
        };
        println!("meta-training {} policy ({} iterations)...", variant.name(), cfg.iterations);
        let out = metarl::meta_train_rl(&mlp, &nav, &cfg).unwrap();
        let (pre, post) = metarl::evaluate_rl(&mlp, &nav, &out.best_params, &cfg, 20, 123).unwrap();
        println!(
            "{}: return {pre:.3} before adaptation -> {post:.3} after (best iter {})",
            variant.name(),
            out.best_iteration
        );
        assert!(post > pre, "adaptation should improve return");
    }
}
