//! MAML on sinusoid regression: meta-train a small MLP, then show that a
//! few gradient steps on 5 support points fit a brand-new sinusoid.

use metalab::algos::{self, AdaptSpec, MetaTrainConfig, Variant};
use metalab::model::{MlpConfig, ModelConfig};
use metalab::rng::SeedStream;
use metalab::taskgen::{self, SinusoidDescriptor};

fn main() {
    let cfg = ModelConfig::Mlp(MlpConfig { input_dim: 1, hidden: vec![32, 32], output_dim: 1 });
    let family = taskgen::make_sinusoid_family(SinusoidDescriptor::default(), 7).unwrap();
    let train = MetaTrainConfig {
        inner_lr: 0.01,
        inner_steps: 1,
        iterations: 800,
        task_batch: 4,
        k_shot: 5,
        q: 10,
        checkpoint_iters: vec![],
        ..MetaTrainConfig::desk_default(Variant::Maml)
    };
    println!("meta-training on random sinusoids ({} iterations)...", train.iterations);
    let out = algos::meta_train_sinusoid(&cfg, &family, &train).unwrap();
    let first = out.history.first().unwrap().meta_loss;
    let last = out.history.last().unwrap().meta_loss;
    println!("meta loss: {first:.4} -> {last:.4}");

    // held-out task: adapt on 5 points, report target MSE before and after
    let mut rng = SeedStream::new(99).derive("demo").rng();
    let ep = taskgen::sample_sinusoid_episode(&family, 5, 50, &mut rng).unwrap();
    let spec = AdaptSpec::for_variant(Variant::Maml, 0.01, 10, &out.params);
    let before = algos::regression_task(
        &cfg,
        &out.params,
        &ep,
        &AdaptSpec { steps: 0, ..spec.clone() },
    )
    .unwrap()
    .0;
    let after = algos::regression_task(&cfg, &out.params, &ep, &spec).unwrap().0;
    println!("new sinusoid, 5-shot: target MSE {before:.4} before adaptation, {after:.4} after");
    assert!(after < before, "adaptation should reduce target loss");
}
