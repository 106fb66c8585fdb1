//! MAML vs ANIL on procedural glyph classification: meta-train both on the
//! same task family and compare few-shot test accuracy on paired episodes.

use metalab::algos::{self, MetaTrainConfig, Variant};
use metalab::inference::{self, EvalMode, EvalSpec};
use metalab::model::{ConvConfig, ModelConfig};
use metalab::taskgen::{self, GlyphDescriptor, Split};

fn main() {
    let model_cfg = ModelConfig::Conv(ConvConfig { filters: 4, ..ConvConfig::default() });
    let family = taskgen::make_glyph_family(GlyphDescriptor::default(), 7).unwrap();
    let spec = EvalSpec { episodes: 100, ..EvalSpec::desk_default(0) };

    for variant in [Variant::Maml, Variant::Anil] {
        let train = MetaTrainConfig {
            iterations: 300,
            checkpoint_iters: vec![],
            ..MetaTrainConfig::desk_default(variant)
        };
        println!("meta-training {} ({} iterations)...", variant.name(), train.iterations);
        let out = algos::meta_train_classifier(&model_cfg, &family, &train).unwrap();
        // ANIL adapts only its head at test time, exactly as in training
        let mode = match variant {
            Variant::Anil => EvalMode::HeadOnly,
            _ => EvalMode::Adapted { freeze_blocks: 0 },
        };
        let report =
            inference::eval_suite(&model_cfg, &out.params, &family, Split::Test, &spec, &mode)
                .unwrap();
        println!(
            "{}: 5-way 1-shot accuracy {:.1}% +/- {:.1}% over {} paired episodes",
            variant.name(),
            100.0 * report.mean_acc,
            100.0 * report.stderr,
            spec.episodes
        );
    }
}
