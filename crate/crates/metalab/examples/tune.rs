//! Temporary hyperparameter sweep driver (env-var controlled).

use metalab::algos::{self, MetaTrainConfig, Variant};
use metalab::inference::{self, EvalMode, EvalSpec};
use metalab::model::{ConvConfig, ModelConfig};
use metalab::taskgen::{self, GlyphDescriptor, Split};

fn envf(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn envu(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let variant = Variant::parse(&std::env::var("VARIANT").unwrap_or("anil".into())).unwrap();
    let inner_lr = envf("INNER_LR", 0.01);
    let eval_lr = envf("EVAL_LR", inner_lr);
    let iters = envu("ITERS", 300);
    let steps = envu("STEPS", 5);
    let eval_steps = envu("EVAL_STEPS", 10);
    let k_shot = envu("K_SHOT", 1);
    let filters = envu("FILTERS", 4);
    let outer_lr = envf("OUTER_LR", 1e-3);
    let noise = envf("NOISE", GlyphDescriptor::default().noise_sigma);
    let model_cfg = ModelConfig::Conv(ConvConfig { filters, ..ConvConfig::default() });
    let rot = envf("ROT", GlyphDescriptor::default().rotation_jitter);
    let trans = envf("TRANS", GlyphDescriptor::default().translation_jitter);
    let family = taskgen::make_glyph_family(
        GlyphDescriptor {
            noise_sigma: noise,
            rotation_jitter: rot,
            translation_jitter: trans,
            ..GlyphDescriptor::default()
        },
        7,
    )
    .unwrap();
    let train = MetaTrainConfig {
        inner_lr,
        inner_steps: steps,
        iterations: iters,
        k_shot,
        outer_lr,
        checkpoint_iters: vec![],
        ..MetaTrainConfig::desk_default(variant)
    };
    let t0 = std::time::Instant::now();
    let out = algos::meta_train_classifier(&model_cfg, &family, &train).unwrap();
    let train_s = t0.elapsed().as_secs_f64();
    let tail: Vec<f64> =
        out.history.iter().rev().take(50).map(|h| h.target_acc).collect();
    println!(
        "{} lr={inner_lr} steps={steps} iters={iters} k={k_shot} filters={filters}: train_acc(last50)={:.3} train_time={train_s:.0}s",
        variant.name(),
        tail.iter().sum::<f64>() / tail.len() as f64,
    );
    let eval_lrs: Vec<f64> = std::env::var("EVAL_LRS")
        .unwrap_or_else(|_| eval_lr.to_string())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    let eval_steps_list: Vec<usize> = std::env::var("EVAL_STEPS_LIST")
        .unwrap_or_else(|_| eval_steps.to_string())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    for (elr, &eval_steps) in eval_lrs
        .iter()
        .flat_map(|&l| eval_steps_list.iter().map(move |s| (l, s)))
    {
        let spec = EvalSpec {
            episodes: 150,
            k_shot,
            inner_lr: elr,
            inner_steps: eval_steps,
            ..EvalSpec::desk_default(1234)
        };
        let mode = match variant {
            Variant::Anil => EvalMode::HeadOnly,
            _ => EvalMode::Adapted { freeze_blocks: 0 },
        };
        let r = inference::eval_suite(&model_cfg, &out.params, &family, Split::Test, &spec, &mode)
            .unwrap();
        let frozen = inference::eval_suite(
            &model_cfg,
            &out.params,
            &family,
            Split::Test,
            &spec,
            &EvalMode::Adapted { freeze_blocks: 4 },
        )
        .unwrap();
        let nil = inference::eval_suite(
            &model_cfg, &out.params, &family, Split::Test, &spec, &EvalMode::Nil,
        )
        .unwrap();
        println!(
            "  eval_lr={elr} eval_steps={eval_steps}: eval={:.3}+/-{:.3} frozen={:.3} nil={:.3}",
            r.mean_acc, r.stderr, frozen.mean_acc, nil.mean_acc
        );
    }
}
