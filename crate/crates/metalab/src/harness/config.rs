//! Line-oriented experiment configuration.
//!
//! Grammar: `[section]` headers, `key = value` lines, `#` comments, blank
//! lines ignored. Every key is optional and has a documented default;
//! unknown sections or keys are rejected with the offending line number.
//! `serialize` emits canonical text that reparses to an equal Config.

use crate::algos::Variant;
use crate::error::{Error, Result};
use crate::model::Normalization;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    /// single-variant training + paired evaluation
    Train,
    /// MAML vs ANIL (vs FOMAML) accuracy parity
    Parity,
    /// layer-freezing sweep on a MAML-trained model
    Freezing,
    /// six training regimes scored through the NIL head
    Regimes,
    /// pre/post-adaptation per-layer similarity
    PrePost,
    /// freezing + similarity at every checkpoint
    OverTraining,
    /// per-layer weight movement during adaptation
    WeightDistance,
    /// cross-seed and cross-algorithm similarity
    CrossSim,
    /// ANIL vs MAML wall-clock benchmark
    Timing,
    /// 2-D navigation meta-RL parity
    Rl,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Parity => "parity",
            ExperimentKind::Freezing => "freezing",
            ExperimentKind::Regimes => "regimes",
            ExperimentKind::PrePost => "prepost",
            ExperimentKind::OverTraining => "overtraining",
            ExperimentKind::WeightDistance => "weightdist",
            ExperimentKind::CrossSim => "crosssim",
            ExperimentKind::Timing => "timing",
            ExperimentKind::Rl => "rl",
        }
    }

    pub fn parse(s: &str) -> Option<ExperimentKind> {
        use ExperimentKind::*;
        Some(match s {
            "train" => Train,
            "parity" => Parity,
            "freezing" => Freezing,
            "regimes" => Regimes,
            "prepost" => PrePost,
            "overtraining" => OverTraining,
            "weightdist" => WeightDistance,
            "crosssim" => CrossSim,
            "timing" => Timing,
            "rl" => Rl,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    // task family
    pub family_seed: u64,
    pub train_classes: usize,
    pub test_classes: usize,
    pub noise_sigma: f64,
    // model
    pub filters: usize,
    pub blocks: usize,
    pub normalization: Normalization,
    // training
    pub variants: Vec<Variant>,
    pub inner_lr: f64,
    pub inner_steps_train: usize,
    pub inner_steps_eval: usize,
    pub outer_lr: f64,
    pub task_batch: usize,
    pub iterations: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_train: usize,
    pub checkpoints: Vec<usize>,
    // evaluation
    pub eval_episodes: usize,
    pub eval_q: usize,
    // repsim
    pub repsim_episodes: usize,
    // timing bench
    pub bench_iters: usize,
    // RL
    pub rl_hidden: usize,
    pub rl_horizon: usize,
    pub rl_task_batch: usize,
    pub rl_n_traj: usize,
    pub rl_iterations: usize,
    pub rl_inner_lr: f64,
    pub rl_eval_tasks: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            kind: ExperimentKind::Train,
            seeds: vec![0],
            out_dir: PathBuf::from("runs/out"),
            family_seed: 7,
            train_classes: 64,
            test_classes: 24,
            noise_sigma: 0.05,
            filters: 8,
            blocks: 4,
            normalization: Normalization::BatchStat,
            variants: vec![Variant::Maml],
            inner_lr: 0.01,
            inner_steps_train: 5,
            inner_steps_eval: 10,
            outer_lr: 1e-3,
            task_batch: 4,
            iterations: 2000,
            n_way: 5,
            k_shot: 1,
            q_train: 5,
            checkpoints: vec![500, 1000, 2000],
            eval_episodes: 600,
            eval_q: 15,
            repsim_episodes: 10,
            bench_iters: 1000,
            rl_hidden: 32,
            rl_horizon: 20,
            rl_task_batch: 10,
            rl_n_traj: 10,
            rl_iterations: 120,
            rl_inner_lr: 0.1,
            rl_eval_tasks: 40,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be non-empty".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::InvalidConfig("variants must be non-empty".into()));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("checkpoints must be strictly ascending".into()));
        }
        if self.checkpoints.iter().any(|&c| c > self.iterations) {
            return Err(Error::InvalidConfig("checkpoint beyond final iteration".into()));
        }
        if self.n_way < 2 || self.k_shot == 0 || self.q_train == 0 {
            return Err(Error::InvalidConfig("episode shape must be positive, n_way >= 2".into()));
        }
        Ok(())
    }
}

fn parse_u64(line: usize, key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::ConfigParse {
        line,
        msg: format!("key `{key}`: expected integer, got `{v}`"),
    })
}

fn parse_usize(line: usize, key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::ConfigParse {
        line,
        msg: format!("key `{key}`: expected integer, got `{v}`"),
    })
}

fn parse_f64(line: usize, key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::ConfigParse {
        line,
        msg: format!("key `{key}`: expected number, got `{v}`"),
    })
}

fn parse_list<T, F: Fn(usize, &str, &str) -> Result<T>>(
    line: usize,
    key: &str,
    v: &str,
    f: F,
) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| f(line, key, p))
        .collect()
}

pub fn parse_config(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut section = String::new();
    let mut checkpoints_set = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            if !content.ends_with(']') {
                return Err(Error::ConfigParse { line, msg: "unterminated section header".into() });
            }
            section = content[1..content.len() - 1].trim().to_string();
            match section.as_str() {
                "experiment" | "family" | "model" | "train" | "eval" | "repsim" | "bench"
                | "rl" => {}
                other => {
                    return Err(Error::ConfigParse {
                        line,
                        msg: format!("unknown section `[{other}]`"),
                    })
                }
            }
            continue;
        }
        let (key, value) = match content.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => {
                return Err(Error::ConfigParse { line, msg: format!("expected `key = value`, got `{content}`") })
            }
        };
        match (section.as_str(), key) {
            ("experiment", "kind") => {
                cfg.kind = ExperimentKind::parse(value).ok_or_else(|| Error::ConfigParse {
                    line,
                    msg: format!("unknown experiment kind `{value}`"),
                })?;
            }
            ("experiment", "seeds") => cfg.seeds = parse_list(line, key, value, parse_u64)?,
            ("experiment", "out_dir") => cfg.out_dir = PathBuf::from(value),
            ("family", "seed") => cfg.family_seed = parse_u64(line, key, value)?,
            ("family", "train_classes") => cfg.train_classes = parse_usize(line, key, value)?,
            ("family", "test_classes") => cfg.test_classes = parse_usize(line, key, value)?,
            ("family", "noise_sigma") => cfg.noise_sigma = parse_f64(line, key, value)?,
            ("model", "filters") => cfg.filters = parse_usize(line, key, value)?,
            ("model", "blocks") => cfg.blocks = parse_usize(line, key, value)?,
            ("model", "normalization") => {
                cfg.normalization = match value {
                    "batch" => Normalization::BatchStat,
                    "none" => Normalization::None,
                    other => {
                        return Err(Error::ConfigParse {
                            line,
                            msg: format!("normalization must be `batch` or `none`, got `{other}`"),
                        })
                    }
                };
            }
            ("train", "variants") => {
                cfg.variants = parse_list(line, key, value, |l, k, v| {
                    Variant::parse(v).map_err(|_| Error::ConfigParse {
                        line: l,
                        msg: format!("key `{k}`: unknown variant `{v}`"),
                    })
                })?;
            }
            ("train", "inner_lr") => cfg.inner_lr = parse_f64(line, key, value)?,
            ("train", "inner_steps_train") => cfg.inner_steps_train = parse_usize(line, key, value)?,
            ("train", "inner_steps_eval") => cfg.inner_steps_eval = parse_usize(line, key, value)?,
            ("train", "outer_lr") => cfg.outer_lr = parse_f64(line, key, value)?,
            ("train", "task_batch") => cfg.task_batch = parse_usize(line, key, value)?,
            ("train", "iterations") => cfg.iterations = parse_usize(line, key, value)?,
            ("train", "n_way") => cfg.n_way = parse_usize(line, key, value)?,
            ("train", "k_shot") => cfg.k_shot = parse_usize(line, key, value)?,
            ("train", "q_train") => cfg.q_train = parse_usize(line, key, value)?,
            ("train", "checkpoints") => {
                cfg.checkpoints = parse_list(line, key, value, parse_usize)?;
                checkpoints_set = true;
            }
            ("eval", "episodes") => cfg.eval_episodes = parse_usize(line, key, value)?,
            ("eval", "q") => cfg.eval_q = parse_usize(line, key, value)?,
            ("repsim", "episodes") => cfg.repsim_episodes = parse_usize(line, key, value)?,
            ("bench", "iterations") => cfg.bench_iters = parse_usize(line, key, value)?,
            ("rl", "hidden") => cfg.rl_hidden = parse_usize(line, key, value)?,
            ("rl", "horizon") => cfg.rl_horizon = parse_usize(line, key, value)?,
            ("rl", "task_batch") => cfg.rl_task_batch = parse_usize(line, key, value)?,
            ("rl", "n_traj") => cfg.rl_n_traj = parse_usize(line, key, value)?,
            ("rl", "iterations") => cfg.rl_iterations = parse_usize(line, key, value)?,
            ("rl", "inner_lr") => cfg.rl_inner_lr = parse_f64(line, key, value)?,
            ("rl", "eval_tasks") => cfg.rl_eval_tasks = parse_usize(line, key, value)?,
            ("", k) => {
                return Err(Error::ConfigParse {
                    line,
                    msg: format!("key `{k}` before any [section] header"),
                })
            }
            (s, k) => {
                return Err(Error::ConfigParse {
                    line,
                    msg: format!("unknown key `{k}` in section `[{s}]`"),
                })
            }
        }
    }
    // the default schedule tracks a shortened run unless set explicitly
    if !checkpoints_set {
        cfg.checkpoints.retain(|&c| c <= cfg.iterations);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn serialize_config(cfg: &Config) -> String {
    let norm = match cfg.normalization {
        Normalization::BatchStat => "batch",
        Normalization::None => "none",
    };
    let variants = cfg.variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(",");
    format!(
        "[experiment]\nkind = {}\nseeds = {}\nout_dir = {}\n\n\
         [family]\nseed = {}\ntrain_classes = {}\ntest_classes = {}\nnoise_sigma = {}\n\n\
         [model]\nfilters = {}\nblocks = {}\nnormalization = {}\n\n\
         [train]\nvariants = {}\ninner_lr = {}\ninner_steps_train = {}\ninner_steps_eval = {}\n\
         outer_lr = {}\ntask_batch = {}\niterations = {}\nn_way = {}\nk_shot = {}\nq_train = {}\n\
         checkpoints = {}\n\n\
         [eval]\nepisodes = {}\nq = {}\n\n\
         [repsim]\nepisodes = {}\n\n\
         [bench]\niterations = {}\n\n\
         [rl]\nhidden = {}\nhorizon = {}\ntask_batch = {}\nn_traj = {}\niterations = {}\n\
         inner_lr = {}\neval_tasks = {}\n",
        cfg.kind.name(),
        join(&cfg.seeds),
        cfg.out_dir.display(),
        cfg.family_seed,
        cfg.train_classes,
        cfg.test_classes,
        cfg.noise_sigma,
        cfg.filters,
        cfg.blocks,
        norm,
        variants,
        cfg.inner_lr,
        cfg.inner_steps_train,
        cfg.inner_steps_eval,
        cfg.outer_lr,
        cfg.task_batch,
        cfg.iterations,
        cfg.n_way,
        cfg.k_shot,
        cfg.q_train,
        join(&cfg.checkpoints),
        cfg.eval_episodes,
        cfg.eval_q,
        cfg.repsim_episodes,
        cfg.bench_iters,
        cfg.rl_hidden,
        cfg.rl_horizon,
        cfg.rl_task_batch,
        cfg.rl_n_traj,
        cfg.rl_iterations,
        cfg.rl_inner_lr,
        cfg.rl_eval_tasks,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn minimal_file_overrides_and_keeps_defaults() {
        let cfg = parse_config("[train]\niterations = 50\n# comment\n\n[eval]\nepisodes = 10\n").unwrap();
        assert_eq!(cfg.iterations, 50);
        assert_eq!(cfg.eval_episodes, 10);
        assert_eq!(cfg.inner_lr, 0.01);
    }

    #[test]
    fn unknown_key_names_line_and_key() {
        let err = parse_config("[train]\ninnerr_lr = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("innerr_lr"), "{msg}");
    }

    #[test]
    fn unknown_section_and_orphan_key_rejected() {
        assert!(parse_config("[nope]\n").is_err());
        let err = parse_config("iterations = 5\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn type_mismatch_names_line() {
        let err = parse_config("[train]\nn_way = five\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("n_way"), "{msg}");
    }

    #[test]
    fn serialize_roundtrips() {
        let mut cfg = Config::default();
        cfg.kind = ExperimentKind::Parity;
        cfg.seeds = vec![1, 2, 3];
        cfg.variants = vec![Variant::Maml, Variant::Anil];
        cfg.checkpoints = vec![10, 20];
        cfg.iterations = 20;
        let text = serialize_config(&cfg);
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invariants_enforced() {
        assert!(parse_config("[experiment]\nseeds = \n").is_err());
        assert!(parse_config("[train]\ncheckpoints = 20,10\n").is_err());
        assert!(parse_config("[train]\niterations = 5\ncheckpoints = 10\n").is_err());
    }
}
