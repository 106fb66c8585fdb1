//! Test-time layer freezing: adapt a MAML-trained model with a growing
//! frozen prefix of conv blocks. Accuracy barely moves even with the whole
//! body frozen, because adaptation is mostly feature reuse.

use metalab::algos::{self, MetaTrainConfig, Variant};
use metalab::inference::{self, EvalMode, EvalSpec};
use metalab::model::{ConvConfig, ModelConfig};
use metalab::taskgen::{self, GlyphDescriptor, Split};

fn main() {
    let conv = ConvConfig { filters: 4, ..ConvConfig::default() };
    let blocks = conv.blocks;
    let model_cfg = ModelConfig::Conv(conv);
    let family = taskgen::make_glyph_family(GlyphDescriptor::default(), 7).unwrap();
    let train = MetaTrainConfig {
        iterations: 300,
        checkpoint_iters: vec![],
        ..MetaTrainConfig::desk_default(Variant::Maml)
    };
    println!("meta-training maml ({} iterations)...", train.iterations);
    let out = algos::meta_train_classifier(&model_cfg, &family, &train).unwrap();

    let spec = EvalSpec { episodes: 100, ..EvalSpec::desk_default(0) };
    let mut accs = Vec::new();
    for freeze in 0..=blocks {
        let report = inference::eval_suite(
            &model_cfg,
            &out.params,
            &family,
            Split::Test,
            &spec,
            &EvalMode::Adapted { freeze_blocks: freeze },
        )
        .unwrap();
        println!(
            "freeze first {freeze} block(s): accuracy {:.1}% +/- {:.1}%",
            100.0 * report.mean_acc,
            100.0 * report.stderr
        );
        accs.push(report.mean_acc);
    }
    let spread = accs.iter().cloned().fold(f64::MIN, f64::max)
        - accs.iter().cloned().fold(f64::MAX, f64::min);
    println!("spread across freezing levels: {:.1} accuracy points", 100.0 * spread);
}
