//! Experiment orchestration: one entry point that trains, evaluates, and
//! persists artifacts for every experiment kind.
//!
//! All outputs are written atomically. Given the same config bytes, reruns
//! produce bitwise identical metrics CSVs (the timing kind reports wall
//! clock and is exempt by nature).

use super::config::{serialize_config, Config, ExperimentKind};
use crate::algos::{
    self, BaselineConfig, MetaTrainConfig, TrainOutput, Variant,
};
use crate::error::{Error, Result};
use crate::inference::{self, EvalMode, EvalReport, EvalSpec};
use crate::metarl::{self, NavConfig, RlTrainConfig};
use crate::model::{self, ActivationDump, ConvConfig, MlpConfig, ModelConfig, Phase};
use crate::recordio;
use crate::repsim;
use crate::taskgen::{self, Episode, Split, TaskFamily};
use serde_json::json;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics: Vec<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub dumps: Vec<PathBuf>,
    pub summary: PathBuf,
}

impl RunArtifacts {
    fn new(out_dir: &Path) -> RunArtifacts {
        RunArtifacts {
            out_dir: out_dir.to_path_buf(),
            metrics: Vec::new(),
            checkpoints: Vec::new(),
            dumps: Vec::new(),
            summary: out_dir.join("summary.json"),
        }
    }
}

pub const WEIGHT_CSV_HEADER: &str = "# metalab wdist v1\nlabel,tensor,distance";
pub const CROSS_ALGO_CSV_HEADER: &str =
    "# metalab crosssim v1\nmetric,maml_maml,anil_anil,anil_maml";
pub const FIT_CSV_HEADER: &str =
    "# metalab crossfit v1\ncomparison,slope,intercept,r2,degenerate";

fn glyph_family(cfg: &Config) -> Result<TaskFamily> {
    taskgen::make_glyph_family(
        taskgen::GlyphDescriptor {
            train_classes: cfg.train_classes,
            test_classes: cfg.test_classes,
            noise_sigma: cfg.noise_sigma,
            ..taskgen::GlyphDescriptor::default()
        },
        cfg.family_seed,
    )
}

fn conv_config(cfg: &Config, n_way: usize) -> ModelConfig {
    ModelConfig::Conv(ConvConfig {
        filters: cfg.filters,
        blocks: cfg.blocks,
        normalization: cfg.normalization,
        n_way,
        ..ConvConfig::default()
    })
}

fn meta_config(cfg: &Config, variant: Variant, seed: u64) -> MetaTrainConfig {
    MetaTrainConfig {
        variant,
        inner_lr: cfg.inner_lr,
        inner_steps: cfg.inner_steps_train,
        outer_lr: cfg.outer_lr,
        task_batch: cfg.task_batch,
        iterations: cfg.iterations,
        clip_norm: algos::DEFAULT_CLIP_NORM,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        q: cfg.q_train,
        seed,
        checkpoint_iters: cfg.checkpoints.clone(),
    }
}

fn eval_spec(cfg: &Config, seed: u64) -> EvalSpec {
    EvalSpec {
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        q: cfg.eval_q,
        episodes: cfg.eval_episodes,
        inner_lr: cfg.inner_lr,
        inner_steps: cfg.inner_steps_eval,
        seed,
    }
}

/// Deterministic test-split episode batch for repsim analyses.
fn repsim_episodes(cfg: &Config, family: &TaskFamily, seed: u64) -> Result<Vec<Episode>> {
    let mut rng = crate::rng::SeedStream::new(seed).derive("repsim").rng();
    (0..cfg.repsim_episodes)
        .map(|_| taskgen::sample_episode(family, Split::Test, cfg.n_way, cfg.k_shot, cfg.eval_q, &mut rng))
        .collect()
}

fn train_variant(
    cfg: &Config,
    family: &TaskFamily,
    variant: Variant,
    seed: u64,
    dir: &Path,
    art: &mut RunArtifacts,
) -> Result<TrainOutput> {
    let model_cfg = conv_config(cfg, cfg.n_way);
    let out = algos::meta_train_classifier(&model_cfg, family, &meta_config(cfg, variant, seed))?;
    let stem = format!("{}_s{seed}", variant.name());
    let hist = dir.join(format!("history_{stem}.csv"));
    algos::write_history_csv(&hist, &out.history)?;
    art.metrics.push(hist);
    let ckpt = dir.join(format!("final_{stem}.mlck"));
    model::write_checkpoint(&ckpt, &model_cfg, &out.params)?;
    art.checkpoints.push(ckpt);
    for (iter, params) in &out.checkpoints {
        let p = dir.join(format!("ckpt{iter}_{stem}.mlck"));
        model::write_checkpoint(&p, &model_cfg, params)?;
        art.checkpoints.push(p);
    }
    Ok(out)
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Run one experiment end to end and return the written artifact paths.
pub fn run_experiment(cfg: &Config) -> Result<RunArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut art = RunArtifacts::new(&cfg.out_dir);
    let mut results = serde_json::Map::new();

    match cfg.kind {
        ExperimentKind::Train => run_train(cfg, &mut art, &mut results)?,
        ExperimentKind::Parity => run_parity(cfg, &mut art, &mut results)?,
        ExperimentKind::Freezing => run_freezing(cfg, &mut art, &mut results)?,
        ExperimentKind::Regimes => run_regimes(cfg, &mut art, &mut results)?,
        ExperimentKind::PrePost => run_pre_post(cfg, &mut art, &mut results)?,
        ExperimentKind::OverTraining => run_over_training(cfg, &mut art, &mut results)?,
        ExperimentKind::WeightDistance => run_weight_distance(cfg, &mut art, &mut results)?,
        ExperimentKind::CrossSim => run_cross_sim(cfg, &mut art, &mut results)?,
        ExperimentKind::Timing => run_timing(cfg, &mut art, &mut results)?,
        ExperimentKind::Rl => run_rl(cfg, &mut art, &mut results)?,
    }

    let summary = json!({
        "kind": cfg.kind.name(),
        "config": serialize_config(cfg),
        "results": serde_json::Value::Object(results),
    });
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::BadFormat(e.to_string()))?;
    recordio::atomic_write(&art.summary, text.as_bytes())?;
    Ok(art)
}

fn seed_dir(cfg: &Config, seed: u64) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(format!("seed{seed}"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run_train(
    cfg: &Config,
    art: &mut RunArtifacts,
    results: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let family = glyph_family(cfg)?;
    let model_cfg = conv_config(cfg, cfg.n_way);
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed)?;
        let mut rows = Vec::new();
        let mut reports: Vec<(String, EvalReport)> = Vec::new();
        for &variant in &cfg.variants {
            let out = train_variant(cfg, &family, variant, seed, &dir, art)?;
            let report = inference::eval_suite(
                &model_cfg,
                &out.params,
                &family,
                Split::Test,
                &eval_spec(cfg, seed),
                &EvalMode::Adapted { freeze_blocks: 0 },
            )?;
            results.insert(
                format!("{}_s{seed}", variant.name()),
                json!({"mean_acc": report.mean_acc, "stderr": report.stderr}),
            );
            reports.push((variant.name().to_string(), report));
        }
        for (label, r) in &reports {
            rows.push((label.clone(), r));
        }
        let eval_csv = dir.join("eval.csv");
        inference::write_eval_summary_csv(&eval_csv, &rows)?;
        art.metrics.push(eval_csv);
    }
    Ok(())
}

fn run_parity(
    cfg: &Config,
    art: &mut RunArtifacts,
    results: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let family = glyph_family(cfg)?;
    let model_cfg = conv_config(cfg, cfg.n_way);
    let mut per_variant: Vec<Vec<f64>> = vec![Vec::new(); cfg.variants.len()];
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed)?;
        let mut reports: Vec<(String, EvalReport)> = Vec::new();
        for (vi, &variant) in cfg.variants.iter().enumerate() {
            let out = train_variant(cfg, &family, variant, seed, &dir, art)?;
            // each variant evaluates with its own test-time mask on the
            // same episode stream, so the comparison is paired
            let mode = match variant {
                Variant::Anil => EvalMode::HeadOnly,
                _ => EvalMode::Adapted { freeze_blocks: 0 },
            };
            let report = inference::eval_suite(
                &model_cfg,
                &out.params,
                &family,
                Split::Test,
                &eval_spec(cfg, seed),
                &mode,
            )?;
            per_variant[vi].push(report.mean_acc);
            reports.push((variant.name().to_string(), report));
        }
        let rows: Vec<(String, &EvalReport)> =
            reports.iter().map(|(l, r)| (l.clone(), r)).collect();
        let eval_csv = dir.join("eval.csv");
        inference::write_eval_summary_csv(&eval_csv, &rows)?;
        art.metrics.push(eval_csv);
    }
    for (vi, &variant) in cfg.variants.iter().enumerate() {
        results.insert(
            variant.name().to_string(),
            json!({"mean_acc_over_seeds": mean_of(&per_variant[vi]), "per_seed": per_variant[vi]}),
        );
    }
    Ok(())
}

fn run_freezing(
    cfg: &Config,
    art: &mut RunArtifacts,
    results: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let family = glyph_family(cfg)?;
    let model_cfg = conv_config(cfg, cfg.n_way);
    let variant = cfg.variants[0];
    let mut per_mask: Vec<Vec<f64>> = vec![Vec::new(); cfg.blocks + 1];
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed)?;
        let out = train_variant(cfg, &family, variant, seed, &dir, art)?;
        let mut reports: Vec<(String, EvalReport)> = Vec::new();
        for freeze in 0..=cfg.blocks {
            let report = inference::eval_suite(
                &model_cfg,
                &out.params,
                &family,
                Split::Test,
                &eval_spec(cfg, seed),
                &EvalMode::Adapted { freeze_blocks: freeze },
            )?;
            per_mask[freeze].push(report.mean_acc);
            reports.push((format!("freeze{freeze}"), report));
        }
        let rows: Vec<(String, &EvalReport)> =
            reports.iter().map(|(l, r)| (l.clone(), r)).collect();
        let eval_csv = dir.join("freezing.csv");
        inference::write_eval_summary_csv(&eval_csv, &rows)?;
        art.metrics.push(eval_csv);
    }
    for (freeze, accs) in per_mask.iter().enumerate() {
        results.insert(
            format!("freeze{freeze}"),
            json!({"mean_acc_over_seeds": mean_of(accs), "per_seed": accs}),
        );
    }
    Ok(())
}

/// The six training regimes of the feature-quality comparison, all scored
/// through the NIL cosine head so the head never contributes.
pub const REGIME_LABELS: [&str; 6] =
    ["maml", "anil", "multiclass", "multitask", "nil-train", "random"];

fn regime_params(
    cfg: &Config,
    family: &TaskFamily,
    label: &str,
    seed: u64,
) -> Result<(ModelConfig, crate::params::ParamSet)> {
    let episodic = conv_config(cfg, cfg.n_way);
    match label {
        "maml" => {
            let out = algos::meta_train_classifier(
                &episodic,
                family,
                &meta_config(cfg, Variant::Maml, seed),
            )?;
            Ok((episodic, out.params))
        }
        "anil" => {
            let out = algos::meta_train_classifier(
                &episodic,
                family,
                &meta_config(cfg, Variant::Anil, seed),
            )?;
            Ok((episodic, out.params))
        }
        "multiclass" => {
            // head as wide as the training split; only the body is scored
            let wide = conv_config(cfg, cfg.train_classes);
            let bl = BaselineConfig {
                iterations: cfg.iterations,
                batch: cfg.task_batch * cfg.n_way,
                lr: cfg.outer_lr,
                clip_norm: algos::DEFAULT_CLIP_NORM,
                seed,
            };
            let out = algos::train_multiclass(&wide, family, &bl)?;
            Ok((wide, out.params))
        }
        "multitask" => {
            let out =
                algos::train_multitask(&episodic, family, &meta_config(cfg, Variant::Maml, seed))?;
            Ok((episodic, out.params))
        }
        "nil-train" => {
            let out =
                algos::train_nil(&episodic, family, &meta_config(cfg, Variant::Maml, seed))?;
            Ok((episodic, out.params))
        }
        "random" => Ok((episodic.clone(), model::init_params(&episodic, seed)?)),
        other => Err(Error::InvalidConfig(format!("unknown regime `{other}`"))),
    }
}

fn run_regimes(
    cfg: &Config,
    art: &mut RunArtifacts,
    results: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let family = glyph_family(cfg)?;
    let mut per_regime: Vec<Vec<f64>> = vec![Vec::new(); REGIME_LABELS.len()];
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed)?;
        let mut reports: Vec<(String, EvalReport)> = Vec::new();
        for (ri, label) in REGIME_LABELS.iter().enumerate() {
            let (model_cfg, params) = regime_params(cfg, &family, label, seed)?;
            let report = inference::eval_suite(
                &model_cfg,
                &params,
                &family,
                Split::Test,
                &eval_spec(cfg, seed),
                &EvalMode::Nil,
            )?;
            per_regime[ri].push(report.mean_acc);
            reports.push((label.to_string(), report));
        }
        let rows: Vec<(String, &EvalReport)> =
            reports.iter().map(|(l, r)| (l.clone(), r)).collect();
        let eval_csv = dir.join("regimes.csv");
        inference::write_eval_summary_csv(&eval_csv, &rows)?;
        art.metrics.push(eval_csv);
    }
    for (ri, label) in REGIME_LABELS.iter().enumerate() {
        results.insert(
            label.to_string(),
            json!({"mean_acc_over_seeds": mean_of(&per_regime[ri]), "per_seed": per_regime[ri]}),
        );
    }
    Ok(())
}

fn run_pre_post(
    cfg: &Config,
    art: &mut RunArtifacts,
    results: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let family = glyph_family(cfg)?;
    let variant = cfg.variants[0];
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed)?;
        let out = train_variant(cfg, &family, variant, seed, &dir, art)?;
        let eps = repsim_episodes(cfg, &family, seed)?;
        let mask = out.params.names();
        let sims = repsim::pre_post_analysis(
            &conv_config(cfg, cfg.n_way),
            &out.params,
            &eps,
            cfg.inner_lr,
            cfg.inner_steps_eval,
            &mask,
        )?;
        for s in &sims {
            results.insert(
                format!("{}_s{seed}", s.layer),
                json!({"cca": s.cca, "cka": s.cka}),
            );
        }
        let csv = dir.join("prepost.csv");
        repsim::write_similarity_csv(&csv, &[(format!("{}_s{seed}", variant.name()), sims)])?;
        art.metrics.push(csv);
    }
    Ok(())
}

fn run_over_training(
    cfg: &Config,
    art: &mut RunArtifacts,
    results: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let family = glyph_family(cfg)?;
    let model_cfg = conv_config(cfg, cfg.n_way);
    let variant = cfg.variants[0];
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed)?;
        let out = train_variant(cfg, &family, variant, seed, &dir, art)?;
        let eps = repsim_episodes(cfg, &family, seed)?;
        let mut eval_rows: Vec<(String, EvalReport)> = Vec::new();
        let mut sim_rows: Vec<(String, Vec<repsim::LayerSimilarity>)> = Vec::new();
        for (iter, params) in &out.checkpoints {
            for freeze in [0, cfg.blocks] {
                let report = inference::eval_suite(
                    &model_cfg,
                    params,
                    &family,
                    Split::Test,
                    &eval_spec(cfg, seed),
                    &EvalMode::Adapted { freeze_blocks: freeze },
                )?;
                results.insert(
                    format!("ckpt{iter}_freeze{freeze}_s{seed}"),
                    json!(report.mean_acc),
                );
                eval_rows.push((format!("ckpt{iter}_freeze{freeze}"), report));
            }
            let sims = repsim::pre_post_analysis(
                &model_cfg,
                params,
                &eps,
                cfg.inner_lr,
                cfg.inner_steps_eval,
                &params.names(),
            )?;
            sim_rows.push((format!("ckpt{iter}"), sims));
        }
        let rows: Vec<(String, &EvalReport)> =
            eval_rows.iter().map(|(l, r)| (l.clone(), r)).collect();
        let freezing_csv = dir.join("freezing_over_training.csv");
        inference::write_eval_summary_csv(&freezing_csv, &rows)?;
        art.metrics.push(freezing_csv);
        let sim_csv = dir.join("prepost_over_training.csv");
        repsim::write_similarity_csv(&sim_csv, &sim_rows)?;
        art.metrics.push(sim_csv);
    }
    Ok(())
}

fn run_weight_distance(
    cfg: &Config,
    art: &mut RunArtifacts,
    results: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let family = glyph_family(cfg)?;
    let model_cfg = conv_config(cfg, cfg.n_way);
    let seed = cfg.seeds[0];
    let dir = seed_dir(cfg, seed)?;
    let mut csv = String::from(WEIGHT_CSV_HEADER);
    csv.push('\n');
    for &variant in &cfg.variants {
        let out = train_variant(cfg, &family, variant, seed, &dir, art)?;
        let eps = repsim_episodes(cfg, &family, seed)?;
        let mask = variant.inner_mask(&out.params);
        let adapted: Vec<_> = eps
            .iter()
            .map(|ep| {
                inference::adapt_for_eval(
                    &model_cfg,
                    &out.params,
                    ep,
                    cfg.inner_lr,
                    cfg.inner_steps_eval,
                    &mask,
                )
            })
            .collect::<Result<_>>()?;
        let dists = repsim::mean_adaptation_distance(&out.params, &adapted)?;
        for (name, d) in &dists {
            csv.push_str(&format!("{},{},{:.10}\n", variant.name(), name, d));
            results.insert(format!("{}_{}", variant.name(), name), json!(d));
        }
    }
    let path = dir.join("weight_distance.csv");
    recordio::atomic_write(&path, csv.as_bytes())?;
    art.metrics.push(path);
    Ok(())
}

/// Dump body+head activations for `params` on a shared probe input.
fn probe_dump(
    model_cfg: &ModelConfig,
    params: &crate::params::ParamSet,
    probe: &crate::tensor::Tensor,
    phase: Phase,
    seed: u64,
) -> Result<ActivationDump> {
    let (_, dump) = model::forward_with_activations(model_cfg, params, probe, phase, seed, 0)?;
    Ok(dump)
}

fn run_cross_sim(
    cfg: &Config,
    art: &mut RunArtifacts,
    results: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let family = glyph_family(cfg)?;
    let model_cfg = conv_config(cfg, cfg.n_way);
    // one shared probe episode: every model sees the same inputs
    let probe_ep = repsim_episodes(cfg, &family, cfg.seeds[0])?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidConfig("repsim_episodes must be >= 1".into()))?;
    let probe = probe_ep.target_x.clone();

    let mut maml_dumps = Vec::new();
    let mut anil_dumps = Vec::new();
    let mut pre_dumps = Vec::new();
    let mut post_dumps = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed)?;
        for (variant, dumps) in
            [(Variant::Maml, &mut maml_dumps), (Variant::Anil, &mut anil_dumps)]
        {
            let out = train_variant(cfg, &family, variant, seed, &dir, art)?;
            let pre = probe_dump(&model_cfg, &out.params, &probe, Phase::PreAdaptation, seed)?;
            let dump_path = dir.join(format!("probe_{}_s{seed}.mlad", variant.name()));
            model::write_activation_dump(&dump_path, &pre)?;
            art.dumps.push(dump_path);
            if variant == Variant::Maml {
                // full-network adaptation on the probe episode for the
                // cross-seed pre/post scatter
                let adapted = inference::adapt_for_eval(
                    &model_cfg,
                    &out.params,
                    &probe_ep,
                    cfg.inner_lr,
                    cfg.inner_steps_eval,
                    &out.params.names(),
                )?;
                post_dumps.push(probe_dump(
                    &model_cfg,
                    &adapted,
                    &probe,
                    Phase::PostAdaptation,
                    seed,
                )?);
                pre_dumps.push(pre.clone());
            }
            dumps.push(pre);
        }
    }

    let table = repsim::cross_algo_similarity(&maml_dumps, &anil_dumps)?;
    let mut csv = String::from(CROSS_ALGO_CSV_HEADER);
    csv.push('\n');
    csv.push_str(&format!(
        "cca,{:.6},{:.6},{:.6}\ncka,{:.6},{:.6},{:.6}\n",
        table.cca[0], table.cca[1], table.cca[2], table.cka[0], table.cka[1], table.cka[2]
    ));
    let path = cfg.out_dir.join("cross_algo.csv");
    recordio::atomic_write(&path, csv.as_bytes())?;
    art.metrics.push(path);
    results.insert("cross_algo_cca".into(), json!(table.cca));
    results.insert("cross_algo_cka".into(), json!(table.cka));

    let analysis = repsim::cross_seed_analysis(&pre_dumps, &post_dumps)?;
    let mut fit_csv = String::from(FIT_CSV_HEADER);
    fit_csv.push('\n');
    for (name, fit) in &analysis.fits {
        fit_csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            name, fit.slope, fit.intercept, fit.r2, fit.degenerate
        ));
        results.insert(
            format!("fit_{name}"),
            json!({"slope": fit.slope, "r2": fit.r2, "degenerate": fit.degenerate}),
        );
    }
    let fit_path = cfg.out_dir.join("cross_seed_fits.csv");
    recordio::atomic_write(&fit_path, fit_csv.as_bytes())?;
    art.metrics.push(fit_path);
    Ok(())
}

fn run_timing(
    cfg: &Config,
    art: &mut RunArtifacts,
    results: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let table = super::bench::timing_bench(&cfg.variants, cfg, cfg.bench_iters)?;
    let path = cfg.out_dir.join("timing.csv");
    super::bench::write_timing_csv(&path, &table)?;
    art.metrics.push(path);
    for r in &table.rows {
        results.insert(
            r.variant.name().to_string(),
            json!({
                "train_mean_ms": r.train_mean_ms,
                "infer_mean_ms": r.infer_mean_ms,
                "train_speedup": r.train_speedup,
                "infer_speedup": r.infer_speedup,
            }),
        );
    }
    results.insert("renders_during_timing".into(), json!(table.renders_during_timing));
    Ok(())
}

fn run_rl(
    cfg: &Config,
    art: &mut RunArtifacts,
    results: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let mlp = MlpConfig { input_dim: 2, hidden: vec![cfg.rl_hidden, cfg.rl_hidden], output_dim: 2 };
    let nav = NavConfig { horizon: cfg.rl_horizon, ..NavConfig::default() };
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed)?;
        for &variant in &cfg.variants {
            let rl_cfg = RlTrainConfig {
                variant,
                inner_lr: cfg.rl_inner_lr,
                inner_steps: 1,
                outer_lr: algos::DEFAULT_OUTER_LR,
                task_batch: cfg.rl_task_batch,
                n_traj: cfg.rl_n_traj,
                iterations: cfg.rl_iterations,
                clip_norm: algos::DEFAULT_CLIP_NORM,
                seed,
            };
            let out = metarl::meta_train_rl(&mlp, &nav, &rl_cfg)?;
            let hist = dir.join(format!("rl_history_{}_s{seed}.csv", variant.name()));
            metarl::write_rl_history_csv(&hist, &out.history)?;
            art.metrics.push(hist);
            let (pre, post) =
                metarl::evaluate_rl(&mlp, &nav, &out.best_params, &rl_cfg, cfg.rl_eval_tasks, seed)?;
            results.insert(
                format!("{}_s{seed}", variant.name()),
                json!({
                    "pre_return": pre,
                    "post_return": post,
                    "best_iteration": out.best_iteration,
                    "best_train_return": out.best_return,
                }),
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(kind: ExperimentKind, out: &Path) -> Config {
        Config {
            kind,
            seeds: vec![0],
            out_dir: out.to_path_buf(),
            filters: 2,
            iterations: 1,
            inner_steps_train: 1,
            inner_steps_eval: 1,
            q_train: 2,
            eval_q: 2,
            eval_episodes: 3,
            repsim_episodes: 2,
            checkpoints: vec![1],
            variants: vec![Variant::Maml],
            ..Config::default()
        }
    }

    #[test]
    fn degenerate_train_run_writes_artifacts_near_chance() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(ExperimentKind::Train, tmp.path());
        cfg.iterations = 0;
        cfg.checkpoints = vec![];
        let art = run_experiment(&cfg).unwrap();
        assert!(art.summary.exists());
        for p in art.metrics.iter().chain(&art.checkpoints) {
            assert!(p.exists(), "missing {}", p.display());
        }
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&art.summary).unwrap()).unwrap();
        let acc = summary["results"]["maml_s0"]["mean_acc"].as_f64().unwrap();
        // untrained 5-way model stays near chance even after head adaptation
        assert!(acc < 0.6, "acc {acc}");
    }

    #[test]
    fn identical_configs_give_bitwise_identical_metrics() {
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let a = run_experiment(&tiny_config(ExperimentKind::Train, t1.path())).unwrap();
        let b = run_experiment(&tiny_config(ExperimentKind::Train, t2.path())).unwrap();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (pa, pb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
    }

    #[test]
    fn regimes_run_emits_one_row_per_regime() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(ExperimentKind::Regimes, tmp.path());
        let art = run_experiment(&cfg).unwrap();
        let csv = std::fs::read_to_string(&art.metrics[0]).unwrap();
        for label in REGIME_LABELS {
            assert!(csv.contains(&format!("\n{label},")), "missing {label} in {csv}");
        }
        assert_eq!(csv.lines().count(), 2 + REGIME_LABELS.len());
    }
}
