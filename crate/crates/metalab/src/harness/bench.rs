//! Wall-clock benchmark: per-iteration training cost and per-episode
//! inference cost for each variant, with speedups relative to second-order
//! MAML.
//!
//! All episodes are generated before the timed region starts; the glyph
//! render counter proves it. Timing uses the monotonic clock.

use super::config::Config;
use crate::algos::{self, AdaptSpec, Adam, Variant};
use crate::error::{Error, Result};
use crate::inference;
use crate::model::{self, ConvConfig, ModelConfig};
use crate::recordio;
use crate::taskgen::{self, Split};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct TimingRow {
    pub variant: Variant,
    pub train_mean_ms: f64,
    pub train_median_ms: f64,
    pub infer_mean_ms: f64,
    pub infer_median_ms: f64,
    /// maml mean / this mean
    pub train_speedup: f64,
    pub infer_speedup: f64,
}

#[derive(Debug, Clone)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
    pub timed_iterations: usize,
    /// glyph renders observed inside timed regions; must be zero
    pub renders_during_timing: u64,
}

const WARMUP: usize = 10;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-variant wall-clock table. `n_iters` counts timed iterations; the
/// first `WARMUP` of each loop run extra and are discarded.
pub fn timing_bench(variants: &[Variant], cfg: &Config, n_iters: usize) -> Result<TimingTable> {
    if n_iters < 100 {
        return Err(Error::InvalidConfig("timing bench needs at least 100 iterations".into()));
    }
    let model_cfg = ModelConfig::Conv(ConvConfig {
        filters: cfg.filters,
        blocks: cfg.blocks,
        normalization: cfg.normalization,
        n_way: cfg.n_way,
        ..ConvConfig::default()
    });
    let family = taskgen::make_glyph_family(
        taskgen::GlyphDescriptor {
            train_classes: cfg.train_classes,
            test_classes: cfg.test_classes,
            noise_sigma: cfg.noise_sigma,
            ..taskgen::GlyphDescriptor::default()
        },
        cfg.family_seed,
    )?;
    let params = model::init_params(&model_cfg, cfg.seeds[0])?;

    // every episode both loops will touch, generated up front
    let mut rng = crate::rng::SeedStream::new(cfg.seeds[0]).derive("bench").rng();
    let total = n_iters + WARMUP;
    let train_eps: Vec<_> = (0..total)
        .map(|_| taskgen::sample_episode(&family, Split::Train, cfg.n_way, cfg.k_shot, cfg.q_train, &mut rng))
        .collect::<Result<_>>()?;
    // inference episodes use the training episode shape; timing then
    // reflects adaptation cost rather than being dominated by scoring a
    // large target batch
    let infer_eps: Vec<_> = (0..total)
        .map(|_| taskgen::sample_episode(&family, Split::Test, cfg.n_way, cfg.k_shot, cfg.q_train, &mut rng))
        .collect::<Result<_>>()?;

    // variants are timed round-robin within each iteration so that any
    // background contention lands on all of them equally
    struct VariantState {
        variant: Variant,
        spec: AdaptSpec,
        mask: Vec<String>,
        opt: Adam,
        cur: crate::params::ParamSet,
        train_times: Vec<f64>,
        infer_times: Vec<f64>,
    }
    let mut states: Vec<VariantState> = variants
        .iter()
        .map(|&variant| VariantState {
            variant,
            spec: AdaptSpec::for_variant(variant, cfg.inner_lr, cfg.inner_steps_train, &params),
            mask: match variant {
                Variant::Anil => params.head_names().to_vec(),
                _ => params.names(),
            },
            opt: Adam::new(cfg.outer_lr),
            cur: params.clone(),
            train_times: Vec::with_capacity(n_iters),
            infer_times: Vec::with_capacity(n_iters),
        })
        .collect();

    let renders_before = taskgen::render_count();
    // training: one task per iteration, meta-gradient plus Adam update
    for (i, ep) in train_eps.iter().enumerate() {
        for st in &mut states {
            let t0 = Instant::now();
            let (_, _, grads) = algos::classification_task(&model_cfg, &st.cur, ep, &st.spec)?;
            st.cur = st.opt.step(&st.cur, &algos::clip_global_norm(&grads, 10.0))?;
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            if i >= WARMUP {
                st.train_times.push(dt);
            }
        }
    }
    // inference: adapt on support with the variant's mask, score target
    for (i, ep) in infer_eps.iter().enumerate() {
        for st in &mut states {
            let t0 = Instant::now();
            let adapted = inference::adapt_for_eval(
                &model_cfg,
                &params,
                ep,
                cfg.inner_lr,
                cfg.inner_steps_eval,
                &st.mask,
            )?;
            let _ = inference::episode_score(&model_cfg, &adapted, ep)?;
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            if i >= WARMUP {
                st.infer_times.push(dt);
            }
        }
    }
    let renders_during_timing = taskgen::render_count() - renders_before;

    let rows: Vec<TimingRow> = states
        .iter()
        .map(|st| TimingRow {
            variant: st.variant,
            train_mean_ms: mean(&st.train_times),
            train_median_ms: median(&st.train_times),
            infer_mean_ms: mean(&st.infer_times),
            infer_median_ms: median(&st.infer_times),
            train_speedup: 0.0,
            infer_speedup: 0.0,
        })
        .collect();
    let mut rows = rows;

    let base = rows
        .iter()
        .find(|r| r.variant == Variant::Maml)
        .map(|r| (r.train_mean_ms, r.infer_mean_ms))
        .unwrap_or((rows[0].train_mean_ms, rows[0].infer_mean_ms));
    for r in &mut rows {
        r.train_speedup = base.0 / r.train_mean_ms;
        r.infer_speedup = base.1 / r.infer_mean_ms;
    }
    Ok(TimingTable { rows, timed_iterations: n_iters, renders_during_timing })
}

pub const TIMING_CSV_HEADER: &str = "# metalab timing v1\nvariant,train_mean_ms,train_median_ms,infer_mean_ms,infer_median_ms,train_speedup,infer_speedup";

pub fn write_timing_csv(path: &Path, table: &TimingTable) -> Result<()> {
    let mut s = String::from(TIMING_CSV_HEADER);
    s.push('\n');
    for r in &table.rows {
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            r.variant.name(),
            r.train_mean_ms,
            r.train_median_ms,
            r.infer_mean_ms,
            r.infer_median_ms,
            r.train_speedup,
            r.infer_speedup
        ));
    }
    recordio::atomic_write(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd_lists() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn bench_excludes_data_generation_and_orders_variants() {
        let cfg = Config {
            filters: 4,
            iterations: 0,
            inner_steps_train: 1,
            inner_steps_eval: 2,
            q_train: 2,
            eval_q: 2,
            ..Config::default()
        };
        let table = timing_bench(&[Variant::Maml, Variant::Anil], &cfg, 100).unwrap();
        assert_eq!(table.renders_during_timing, 0);
        assert_eq!(table.rows.len(), 2);
        let maml = &table.rows[0];
        let anil = &table.rows[1];
        assert!((maml.train_speedup - 1.0).abs() < 1e-9);
        assert!(anil.train_speedup > 1.0, "anil train speedup {}", anil.train_speedup);
        assert!(anil.infer_speedup > 1.0, "anil infer speedup {}", anil.infer_speedup);
    }
}
