//! Second-order meta-gradients on the tape, checked against central finite
//! differences of the full inner-loop unroll.

use metalab::algos::{self, AdaptSpec, Variant};
use metalab::model::{MlpConfig, ModelConfig};
use metalab::params::ParamSet;
use metalab::rng::SeedStream;
use metalab::taskgen::{self, RegressionEpisode, SinusoidDescriptor};

fn perturbed(params: &ParamSet, name: &str, idx: usize, h: f64) -> ParamSet {
    let entries = params
        .iter()
        .map(|(n, t)| {
            let mut t = t.clone();
            if n == name {
                t.data_mut()[idx] += h;
            }
            (n.to_string(), t)
        })
        .collect();
    ParamSet::new(entries, params.head_names().to_vec()).unwrap()
}

fn meta_loss(cfg: &ModelConfig, params: &ParamSet, ep: &RegressionEpisode, spec: &AdaptSpec) -> f64 {
    algos::regression_task(cfg, params, ep, spec).unwrap().0
}

fn main() {
    let cfg = ModelConfig::Mlp(MlpConfig { input_dim: 1, hidden: vec![8], output_dim: 1 });
    let params = metalab::model::init_params(&cfg, 3).unwrap();
    let family = taskgen::make_sinusoid_family(SinusoidDescriptor::default(), 11).unwrap();
    let mut rng = SeedStream::new(5).rng();
    let ep = taskgen::sample_sinusoid_episode(&family, 5, 5, &mut rng).unwrap();

    for steps in [1usize, 2] {
        let spec = AdaptSpec::for_variant(Variant::Maml, 0.05, steps, &params);
        let (_, grads) = algos::regression_task(&cfg, &params, &ep, &spec).unwrap();

        // central finite differences over every coordinate
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (name, g) in grads.iter() {
            for (i, &ga) in g.data().iter().enumerate() {
                let plus = perturbed(&params, name, i, h);
                let minus = perturbed(&params, name, i, -h);
                let fd = (meta_loss(&cfg, &plus, &ep, &spec)
                    - meta_loss(&cfg, &minus, &ep, &spec))
                    / (2.0 * h);
                let rel = (ga - fd).abs() / fd.abs().max(1e-6);
                worst = worst.max(rel);
            }
        }
        println!("inner steps = {steps}: worst relative error vs finite differences = {worst:.3e}");
        assert!(worst < 1e-3);
    }
    println!("second-order meta-gradient matches the finite-difference oracle");
}
