//! NIL: throw the trained head away and classify by cosine similarity
//! between body embeddings of query and support examples. On an
//! ANIL-trained body this matches head-based adaptation.

use metalab::algos::{self, MetaTrainConfig, Variant};
use metalab::inference::{self, EvalMode, EvalSpec};
use metalab::model::{ConvConfig, ModelConfig};
use metalab::taskgen::{self, GlyphDescriptor, Split};

fn main() {
    let model_cfg = ModelConfig::Conv(ConvConfig { filters: 4, ..ConvConfig::default() });
    let family = taskgen::make_glyph_family(GlyphDescriptor::default(), 7).unwrap();
    let train = MetaTrainConfig {
        iterations: 300,
        checkpoint_iters: vec![],
        ..MetaTrainConfig::desk_default(Variant::Anil)
    };
    println!("meta-training anil ({} iterations)...", train.iterations);
    let out = algos::meta_train_classifier(&model_cfg, &family, &train).unwrap();

    let spec = EvalSpec { episodes: 100, ..EvalSpec::desk_default(0) };
    let adapted = inference::eval_suite(
        &model_cfg, &out.params, &family, Split::Test, &spec, &EvalMode::HeadOnly,
    )
    .unwrap();
    let nil = inference::eval_suite(
        &model_cfg, &out.params, &family, Split::Test, &spec, &EvalMode::Nil,
    )
    .unwrap();
    println!(
        "anil head adaptation: {:.1}%   nil cosine classifier: {:.1}%   (paired episodes)",
        100.0 * adapted.mean_acc,
        100.0 * nil.mean_acc
    );
    let gap = (adapted.mean_acc - nil.mean_acc).abs();
    println!("gap: {:.1} accuracy points", 100.0 * gap);
}
