//! Canned configurations, one per headline table or figure.

use super::config::{Config, ExperimentKind};
use crate::algos::Variant;
use crate::error::{Error, Result};

pub fn preset_names() -> &'static [&'static str] {
    &["table1", "table2", "table5", "table6", "fig2", "fig3", "fig6", "rl"]
}

/// Desk-scale preset. Output directory defaults to `runs/<name>`.
pub fn preset(name: &str) -> Result<Config> {
    let mut cfg = Config::default();
    cfg.out_dir = std::path::PathBuf::from(format!("runs/{name}"));
    match name {
        // layer freezing on a MAML-trained model
        "table1" => {
            cfg.kind = ExperimentKind::Freezing;
            cfg.seeds = vec![0, 1, 2];
            cfg.variants = vec![Variant::Maml];
        }
        // MAML / FOMAML / ANIL accuracy parity
        "table2" => {
            cfg.kind = ExperimentKind::Parity;
            cfg.seeds = vec![0, 1, 2];
            cfg.variants = vec![Variant::Maml, Variant::Fomaml, Variant::Anil];
        }
        // six training regimes scored through the NIL head
        "table5" => {
            cfg.kind = ExperimentKind::Regimes;
            cfg.seeds = vec![0, 1, 2];
            cfg.variants = vec![Variant::Maml, Variant::Anil];
        }
        // wall-clock benchmark
        "table6" => {
            cfg.kind = ExperimentKind::Timing;
            cfg.seeds = vec![0];
            cfg.variants = vec![Variant::Maml, Variant::Fomaml, Variant::Anil];
        }
        // pre/post-adaptation per-layer similarity
        "fig2" => {
            cfg.kind = ExperimentKind::PrePost;
            cfg.seeds = vec![0, 1, 2];
            cfg.variants = vec![Variant::Maml];
        }
        // freezing and similarity at every checkpoint
        "fig3" => {
            cfg.kind = ExperimentKind::OverTraining;
            cfg.seeds = vec![0];
            cfg.variants = vec![Variant::Maml];
        }
        // per-layer weight movement during adaptation
        "fig6" => {
            cfg.kind = ExperimentKind::WeightDistance;
            cfg.seeds = vec![0];
            cfg.variants = vec![Variant::Maml, Variant::Anil];
        }
        "rl" => {
            cfg.kind = ExperimentKind::Rl;
            cfg.seeds = vec![0, 1, 2];
            cfg.variants = vec![Variant::Maml, Variant::Anil];
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown preset `{other}`; available: {}",
                preset_names().join(", ")
            )))
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_valid_and_distinct() {
        let mut kinds = Vec::new();
        for name in preset_names() {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            kinds.push((name.to_string(), cfg.kind));
        }
        assert_eq!(kinds.len(), 8);
    }

    #[test]
    fn unknown_preset_lists_options() {
        let err = preset("table9").unwrap_err().to_string();
        assert!(err.contains("table9") && err.contains("table1"), "{err}");
    }
}
