//! Representational similarity before vs after adaptation: CCA and CKA per
//! layer. Body layers barely move; the head changes the most.

use metalab::algos::{self, MetaTrainConfig, Variant};
use metalab::model::{ConvConfig, ModelConfig};
use metalab::repsim;
use metalab::rng::SeedStream;
use metalab::taskgen::{self, GlyphDescriptor, Split};

fn main() {
    let model_cfg = ModelConfig::Conv(ConvConfig { filters: 4, ..ConvConfig::default() });
    let family = taskgen::make_glyph_family(GlyphDescriptor::default(), 7).unwrap();
    let train = MetaTrainConfig {
        iterations: 300,
        checkpoint_iters: vec![],
        ..MetaTrainConfig::desk_default(Variant::Maml)
    };
    println!("meta-training maml ({} iterations)...", train.iterations);
    let out = algos::meta_train_classifier(&model_cfg, &family, &train).unwrap();

    let mut rng = SeedStream::new(1).derive("repsim").rng();
    let episodes: Vec<_> = (0..10)
        .map(|_| taskgen::sample_episode(&family, Split::Test, 5, 1, 15, &mut rng).unwrap())
        .collect();
    let sims = repsim::pre_post_analysis(
        &model_cfg,
        &out.params,
        &episodes,
        0.01,
        10,
        &out.params.names(),
    )
    .unwrap();
    println!("{:<8} {:>8} {:>8}", "layer", "cca", "cka");
    for s in &sims {
        println!("{:<8} {:>8.4} {:>8.4}", s.layer, s.cca, s.cka);
    }
    let head = sims.last().unwrap();
    let min_body = sims[..sims.len() - 1].iter().map(|s| s.cca).fold(f64::MAX, f64::min);
    println!("min body cca {min_body:.4} vs head cca {:.4}", head.cca);
}
