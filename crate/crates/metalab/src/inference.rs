//! Evaluation-time machinery: test-time adaptation, the layer-freezing
//! protocol, and the head-free NIL classifier.
//!
//! Evaluation adaptation runs plain SGD on the support set (no meta-gradient
//! is needed once training is done), then scores the target set. Freezing
//! removes a contiguous prefix of body blocks from the adaptation mask;
//! the head always stays adaptable unless the caller masks it out too.

use crate::algos::{self, accuracy};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::{GradMap, ParamSet};
use crate::rng::SeedStream;
use crate::recordio;
use crate::tape::Tape;
use crate::taskgen::{self, Episode, Split, TaskFamily};
use serde::Serialize;
use std::path::Path;

/// Evaluation protocol shared by all algorithms so episode streams stay
/// paired: the same (family, split, spec, seed) yields the same episodes.
#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q: usize,
    pub episodes: usize,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub seed: u64,
}

impl EvalSpec {
    pub fn desk_default(seed: u64) -> EvalSpec {
        EvalSpec { n_way: 5, k_shot: 1, q: 15, episodes: 600, inner_lr: 0.01, inner_steps: 10, seed }
    }
}

/// Adaptation mask with the first `freeze_blocks` conv blocks removed.
/// Block i freezes `conv{i}.*` and `bn{i}.*` together.
pub fn freeze_mask(params: &ParamSet, freeze_blocks: usize) -> Vec<String> {
    let frozen = |name: &str| {
        for i in 1..=freeze_blocks {
            if name.starts_with(&format!("conv{i}.")) || name.starts_with(&format!("bn{i}.")) {
                return true;
            }
        }
        false
    };
    params.names().into_iter().filter(|n| !frozen(n)).collect()
}

/// Gradients of the support cross-entropy w.r.t. the masked parameters.
fn support_grads(
    cfg: &ModelConfig,
    params: &ParamSet,
    ep: &Episode,
    mask: &[String],
) -> Result<GradMap> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape)?;
    let x = tape.constant(ep.support_x.clone())?;
    let tr = model::forward(cfg, &mut tape, &binding, x)?;
    let loss = tape.softmax_cross_entropy(tr.logits, &ep.support_y)?;
    let ids: Vec<_> = mask.iter().map(|n| binding.get(n)).collect::<Result<_>>()?;
    let grads = tape.grad(loss, &ids)?;
    let mut map = GradMap::new();
    for (name, g) in mask.iter().zip(grads) {
        map.insert(name.clone(), tape.value(g).clone());
    }
    Ok(map)
}

/// SGD on the support set over the masked parameters; everything outside the
/// mask is returned bit-identical.
///
/// Head-only masks take a fast path: the frozen body means support features
/// are the same at every step, so they are computed once and the inner loop
/// touches only the head. Numerically identical to the general path.
pub fn adapt_for_eval(
    cfg: &ModelConfig,
    params: &ParamSet,
    ep: &Episode,
    lr: f64,
    steps: usize,
    mask: &[String],
) -> Result<ParamSet> {
    let head = params.head_names();
    let head_only = mask.len() == head.len() && mask.iter().all(|m| head.contains(m));
    if head_only && params.get("head.w").is_some() {
        return adapt_head_cached(cfg, params, ep, lr, steps);
    }
    algos::adapt_params_sgd(params, mask, lr, steps, |p| support_grads(cfg, p, ep, mask))
}

/// Head-only adaptation on cached support features.
fn adapt_head_cached(
    cfg: &ModelConfig,
    params: &ParamSet,
    ep: &Episode,
    lr: f64,
    steps: usize,
) -> Result<ParamSet> {
    // one body pass over the support batch
    let features = {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape)?;
        let x = tape.constant(ep.support_x.clone())?;
        let tr = model::forward(cfg, &mut tape, &binding, x)?;
        tape.value(tr.features).clone()
    };
    let mut w = params.get("head.w").unwrap().clone();
    let mut b = params.get("head.b").unwrap().clone();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone())?;
        let wid = tape.leaf(w.clone())?;
        let bid = tape.leaf(b.clone())?;
        let z = tape.matmul(f, wid)?;
        let logits = tape.bias_add(z, bid)?;
        let loss = tape.softmax_cross_entropy(logits, &ep.support_y)?;
        let grads = tape.grad(loss, &[wid, bid])?;
        let (gw, gb) = (tape.value(grads[0]).clone(), tape.value(grads[1]).clone());
        for (v, g) in w.data_mut().iter_mut().zip(gw.data()) {
            *v -= lr * g;
        }
        for (v, g) in b.data_mut().iter_mut().zip(gb.data()) {
            *v -= lr * g;
        }
    }
    let entries = params
        .iter()
        .map(|(n, t)| {
            let t = match n {
                "head.w" => w.clone(),
                "head.b" => b.clone(),
                _ => t.clone(),
            };
            (n.to_string(), t)
        })
        .collect();
    ParamSet::new(entries, params.head_names().to_vec())
}

/// Target-set accuracy and cross-entropy under fixed parameters.
pub fn episode_score(cfg: &ModelConfig, params: &ParamSet, ep: &Episode) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape)?;
    let x = tape.constant(ep.target_x.clone())?;
    let tr = model::forward(cfg, &mut tape, &binding, x)?;
    let acc = accuracy(tape.value(tr.logits), &ep.target_y);
    let loss = tape.softmax_cross_entropy(tr.logits, &ep.target_y)?;
    let loss_v = tape.scalar_value(loss)?;
    Ok((acc, loss_v))
}

/// NIL predictions: class score is the summed cosine similarity between the
/// query embedding and the support embeddings of that class. `softmax_probs`
/// turns scores into probabilities; the argmax is unchanged either way.
pub fn nil_predict(
    cfg: &ModelConfig,
    params: &ParamSet,
    ep: &Episode,
    softmax_probs: bool,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape)?;
    let (_, logits_id) = algos::nil_episode_loss(cfg, &mut tape, &binding, ep).map(|(l, s)| (l, s))?;
    let scores = if softmax_probs {
        let sm = tape.softmax_axis1(logits_id)?;
        tape.value(sm).clone()
    } else {
        tape.value(logits_id).clone()
    };
    let (n, c) = (scores.shape()[0], scores.shape()[1]);
    let mut preds = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = scores.data()[i * c..(i + 1) * c].to_vec();
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        preds.push(best);
        rows.push(row);
    }
    Ok((preds, rows))
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean_acc: f64,
    /// standard error of the mean: std / sqrt(n)
    pub stderr: f64,
    pub mean_loss: f64,
    pub per_episode: Vec<EpisodeResult>,
}

impl EvalReport {
    pub fn from_results(per_episode: Vec<EpisodeResult>) -> EvalReport {
        let n = per_episode.len().max(1) as f64;
        let mean_acc = per_episode.iter().map(|r| r.accuracy).sum::<f64>() / n;
        let mean_loss = per_episode.iter().map(|r| r.loss).sum::<f64>() / n;
        let var = per_episode.iter().map(|r| (r.accuracy - mean_acc).powi(2)).sum::<f64>() / n;
        EvalReport { mean_acc, stderr: var.sqrt() / n.sqrt(), mean_loss, per_episode }
    }

    /// One JSON object per line, one line per episode.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for r in &self.per_episode {
            s.push_str(&serde_json::to_string(r).expect("episode result serializes"));
            s.push('\n');
        }
        recordio::atomic_write(path, s.as_bytes())
    }
}

pub const EVAL_CSV_HEADER: &str = "# metalab eval v1\nlabel,episodes,mean_acc,stderr,mean_loss";

/// Append-style CSV summary over several labelled reports.
pub fn write_eval_summary_csv(path: &Path, rows: &[(String, &EvalReport)]) -> Result<()> {
    let mut s = String::from(EVAL_CSV_HEADER);
    s.push('\n');
    for (label, r) in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            label,
            r.per_episode.len(),
            r.mean_acc,
            r.stderr,
            r.mean_loss
        ));
    }
    recordio::atomic_write(path, s.as_bytes())
}

/// How parameters meet each evaluation episode.
#[derive(Debug, Clone)]
pub enum EvalMode {
    /// SGD-adapt the masked parameters on the support set.
    Adapted { freeze_blocks: usize },
    /// Head-only adaptation regardless of how the model was trained.
    HeadOnly,
    /// No adaptation at all; score the target set directly.
    Frozen,
    /// NIL cosine classifier over body embeddings, no adaptation.
    Nil,
}

/// Evaluate over a deterministic episode stream. Different models evaluated
/// with the same (family, spec) see identical episodes.
pub fn eval_suite(
    cfg: &ModelConfig,
    params: &ParamSet,
    family: &TaskFamily,
    split: Split,
    spec: &EvalSpec,
    mode: &EvalMode,
) -> Result<EvalReport> {
    if spec.episodes == 0 {
        return Err(Error::InvalidConfig("eval needs at least one episode".into()));
    }
    let mut rng = SeedStream::new(spec.seed).derive("eval").rng();
    let mut results = Vec::with_capacity(spec.episodes);
    for i in 0..spec.episodes {
        let ep = taskgen::sample_episode(family, split, spec.n_way, spec.k_shot, spec.q, &mut rng)?;
        let (acc, loss) = match mode {
            EvalMode::Adapted { freeze_blocks } => {
                let mask = freeze_mask(params, *freeze_blocks);
                let adapted =
                    adapt_for_eval(cfg, params, &ep, spec.inner_lr, spec.inner_steps, &mask)?;
                episode_score(cfg, &adapted, &ep)?
            }
            EvalMode::HeadOnly => {
                let mask = params.head_names().to_vec();
                let adapted =
                    adapt_for_eval(cfg, params, &ep, spec.inner_lr, spec.inner_steps, &mask)?;
                episode_score(cfg, &adapted, &ep)?
            }
            EvalMode::Frozen => episode_score(cfg, params, &ep)?,
            EvalMode::Nil => {
                let (preds, _) = nil_predict(cfg, params, &ep, false)?;
                let hits =
                    preds.iter().zip(&ep.target_y).filter(|(p, y)| p == y).count();
                (hits as f64 / ep.target_y.len() as f64, f64::NAN)
            }
        };
        results.push(EpisodeResult { episode: i, accuracy: acc, loss });
    }
    Ok(EvalReport::from_results(results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvConfig;
    use crate::tensor::Tensor;

    fn small_setup() -> (ModelConfig, ParamSet, TaskFamily) {
        let cfg = ModelConfig::Conv(ConvConfig { filters: 4, ..ConvConfig::default() });
        let params = model::init_params(&cfg, 1).unwrap();
        let family = taskgen::make_glyph_family(taskgen::GlyphDescriptor::default(), 2).unwrap();
        (cfg, params, family)
    }

    #[test]
    fn freeze_mask_removes_contiguous_prefix() {
        let (_, params, _) = small_setup();
        let m0 = freeze_mask(&params, 0);
        assert_eq!(m0.len(), params.len());
        let m2 = freeze_mask(&params, 2);
        assert!(!m2.iter().any(|n| n.starts_with("conv1") || n.starts_with("bn2")));
        assert!(m2.iter().any(|n| n == "conv3.w"));
        assert!(m2.iter().any(|n| n == "head.w"));
        let m4 = freeze_mask(&params, 4);
        assert_eq!(m4, vec!["head.w".to_string(), "head.b".to_string()]);
    }

    #[test]
    fn frozen_params_stay_bit_identical_after_adaptation() {
        let (cfg, params, family) = small_setup();
        let mut rng = SeedStream::new(5).rng();
        let ep = taskgen::sample_episode(&family, Split::Train, 5, 1, 2, &mut rng).unwrap();
        let mask = freeze_mask(&params, 4);
        let adapted = adapt_for_eval(&cfg, &params, &ep, 0.01, 2, &mask).unwrap();
        for (name, t) in params.iter() {
            if name.starts_with("head") {
                assert_ne!(t, adapted.get(name).unwrap(), "{name} should move");
            } else {
                assert_eq!(t, adapted.get(name).unwrap(), "{name} should be frozen");
            }
        }
    }

    #[test]
    fn accuracy_breaks_ties_toward_lowest_index() {
        let logits = Tensor::matrix(2, 3, vec![1.0, 1.0, 1.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1]), 1.0);
        assert_eq!(accuracy(&logits, &[2, 2]), 0.0);
    }

    #[test]
    fn nil_softmax_flag_preserves_argmax() {
        let (cfg, params, family) = small_setup();
        let mut rng = SeedStream::new(6).rng();
        let ep = taskgen::sample_episode(&family, Split::Test, 5, 5, 3, &mut rng).unwrap();
        let (raw_preds, raw_scores) = nil_predict(&cfg, &params, &ep, false).unwrap();
        let (sm_preds, sm_scores) = nil_predict(&cfg, &params, &ep, true).unwrap();
        assert_eq!(raw_preds, sm_preds);
        for row in &sm_scores {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert_ne!(raw_scores, sm_scores);
    }

    #[test]
    fn eval_suite_is_deterministic_and_paired() {
        let (cfg, params, family) = small_setup();
        let spec = EvalSpec { episodes: 3, q: 3, ..EvalSpec::desk_default(7) };
        let a = eval_suite(&cfg, &params, &family, Split::Test, &spec, &EvalMode::Frozen).unwrap();
        let b = eval_suite(&cfg, &params, &family, Split::Test, &spec, &EvalMode::Frozen).unwrap();
        assert_eq!(a.mean_acc, b.mean_acc);
        // a different model sees the same episodes: frozen scores of the same
        // params under HeadOnly-with-0-steps match Frozen
        let spec0 = EvalSpec { inner_steps: 0, ..spec };
        let c = eval_suite(&cfg, &params, &family, Split::Test, &spec0, &EvalMode::HeadOnly).unwrap();
        assert_eq!(a.mean_acc, c.mean_acc);
    }

    #[test]
    fn report_stats_match_hand_computation() {
        let results = vec![
            EpisodeResult { episode: 0, accuracy: 0.2, loss: 1.0 },
            EpisodeResult { episode: 1, accuracy: 0.4, loss: 2.0 },
            EpisodeResult { episode: 2, accuracy: 0.6, loss: 3.0 },
        ];
        let r = EvalReport::from_results(results);
        assert!((r.mean_acc - 0.4).abs() < 1e-12);
        assert!((r.mean_loss - 2.0).abs() < 1e-12);
        let var: f64 = (0.04 + 0.0 + 0.04) / 3.0;
        assert!((r.stderr - (var.sqrt() / 3f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn jsonl_and_csv_outputs_written() {
        let r = EvalReport::from_results(vec![EpisodeResult {
            episode: 0,
            accuracy: 0.5,
            loss: 1.2,
        }]);
        let dir = std::env::temp_dir().join("metalab_eval_test");
        std::fs::create_dir_all(&dir).unwrap();
        let jl = dir.join("eval.jsonl");
        r.write_jsonl(&jl).unwrap();
        let s = std::fs::read_to_string(&jl).unwrap();
        assert!(s.contains("\"accuracy\":0.5"));
        let csv = dir.join("eval.csv");
        write_eval_summary_csv(&csv, &[("maml".to_string(), &r)]).unwrap();
        let s = std::fs::read_to_string(&csv).unwrap();
        assert!(s.starts_with("# metalab eval v1"));
        assert!(s.contains("maml,1,0.500000"));
    }
}
