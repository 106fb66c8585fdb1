//! Few-shot backbones: the 4-block conv net (scaled down) and a small MLP,
//! both with a head/body parameter partition and per-layer activation
//! capture for similarity analysis.
//!
//! Batch normalization uses current-batch statistics in both training and
//! evaluation (transductive, no running averages); this is a config flag
//! because it materially affects 1-shot behavior.

use crate::error::{Error, Result};
use crate::params::{NodeBinding, ParamSet};
use crate::recordio::{self, Record};
use crate::rng::SeedStream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    BatchStat,
    None,
}

/// Conv backbone configuration. Desk-scale default is 8 filters; the full
/// 32-filter variant stays available through config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub blocks: usize,
    pub filters: usize,
    pub normalization: Normalization,
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub n_way: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        ConvConfig {
            blocks: 4,
            filters: 8,
            normalization: Normalization::BatchStat,
            input: (1, 20, 20),
            n_way: 5,
        }
    }
}

impl ConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.filters == 0 {
            return Err(Error::InvalidConfig("conv blocks and filters must be positive".into()));
        }
        if self.n_way < 2 {
            return Err(Error::InvalidConfig("head width must be at least 2".into()));
        }
        let (mut h, mut w) = (self.input.1, self.input.2);
        for b in 0..self.blocks {
            if h < 2 || w < 2 {
                return Err(Error::InvalidConfig(format!(
                    "spatial dims collapse below 1 at block {}",
                    b + 1
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// Spatial size after each pool, starting from the input.
    fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input.1, self.input.2);
        let mut out = vec![(h, w)];
        for _ in 0..self.blocks {
            h /= 2;
            w /= 2;
            out.push((h, w));
        }
        out
    }

    /// Flattened penultimate-feature width (conv4 output).
    pub fn feature_dim(&self) -> usize {
        let (h, w) = *self.spatial_sizes().last().unwrap();
        self.filters * h * w
    }
}

/// MLP configuration (sinusoid regression, RL policy trunk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("MLP dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelConfig {
    Conv(ConvConfig),
    Mlp(MlpConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Conv(c) => c.validate(),
            ModelConfig::Mlp(c) => c.validate(),
        }
    }
}

/// Truncated normal (|z| <= 2) with std 1/sqrt(fan_in).
fn init_weight(shape: Vec<usize>, fan_in: usize, stream: &SeedStream) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    let mut rng = stream.rng();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let z = (-2.0 * u1.ln()).sqrt() * u2.cos();
        if z.abs() <= 2.0 {
            data.push(std * z);
        }
    }
    Tensor::new(shape, data).expect("init shape")
}

/// Deterministic parameter initialization: weights truncated normal with
/// std 1/sqrt(fan_in), biases zero, BN scale one / shift zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let stream = SeedStream::new(seed).derive("init");
    match cfg {
        ModelConfig::Conv(c) => init_conv_params(c, &stream),
        ModelConfig::Mlp(c) => init_mlp_params(c, &stream),
    }
}

fn init_conv_params(cfg: &ConvConfig, stream: &SeedStream) -> Result<ParamSet> {
    let mut entries = Vec::new();
    let mut in_ch = cfg.input.0;
    for b in 1..=cfg.blocks {
        let name = format!("conv{b}");
        let fan_in = in_ch * 9;
        entries.push((
            format!("{name}.w"),
            init_weight(vec![cfg.filters, in_ch, 3, 3], fan_in, &stream.derive(&name)),
        ));
        entries.push((format!("{name}.b"), Tensor::zeros(vec![cfg.filters])));
        if cfg.normalization == Normalization::BatchStat {
            entries.push((format!("bn{b}.gamma"), Tensor::full(vec![cfg.filters], 1.0)));
            entries.push((format!("bn{b}.beta"), Tensor::zeros(vec![cfg.filters])));
        }
        in_ch = cfg.filters;
    }
    let d = cfg.feature_dim();
    entries.push((
        "head.w".to_string(),
        init_weight(vec![d, cfg.n_way], d, &stream.derive("head")),
    ));
    entries.push(("head.b".to_string(), Tensor::zeros(vec![cfg.n_way])));
    ParamSet::new(entries, vec!["head.w".into(), "head.b".into()])
}

fn init_mlp_params(cfg: &MlpConfig, stream: &SeedStream) -> Result<ParamSet> {
    let mut entries = Vec::new();
    let mut dims = vec![cfg.input_dim];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(cfg.output_dim);
    let n_layers = dims.len() - 1;
    for l in 0..n_layers {
        let name = if l + 1 == n_layers { "head".to_string() } else { format!("fc{}", l + 1) };
        entries.push((
            format!("{name}.w"),
            init_weight(vec![dims[l], dims[l + 1]], dims[l], &stream.derive(&name)),
        ));
        entries.push((format!("{name}.b"), Tensor::zeros(vec![dims[l + 1]])));
    }
    ParamSet::new(entries, vec!["head.w".into(), "head.b".into()])
}

/// Forward-pass outputs with per-layer activation capture.
pub struct ForwardTrace {
    pub logits: NodeId,
    /// Flattened penultimate representation, [N, feature_dim].
    pub features: NodeId,
    /// (layer name, node) for conv1..convB and the head output.
    pub activations: Vec<(String, NodeId)>,
}

/// Build the forward pass on the tape using bound parameter nodes (which may
/// be adapted, non-leaf nodes).
pub fn forward(
    cfg: &ModelConfig,
    tape: &mut Tape,
    params: &NodeBinding,
    inputs: NodeId,
) -> Result<ForwardTrace> {
    match cfg {
        ModelConfig::Conv(c) => forward_conv(c, tape, params, inputs),
        ModelConfig::Mlp(c) => forward_mlp(c, tape, params, inputs),
    }
}

fn forward_conv(
    cfg: &ConvConfig,
    tape: &mut Tape,
    params: &NodeBinding,
    inputs: NodeId,
) -> Result<ForwardTrace> {
    let in_shape = tape.value(inputs).shape().to_vec();
    if in_shape.len() != 4
        || in_shape[1] != cfg.input.0
        || in_shape[2] != cfg.input.1
        || in_shape[3] != cfg.input.2
    {
        return Err(Error::ShapeMismatch {
            op: "forward_conv",
            detail: format!("input {:?} vs config {:?}", in_shape, cfg.input),
        });
    }
    let n = in_shape[0];
    let mut x = inputs;
    let mut activations = Vec::new();
    for b in 1..=cfg.blocks {
        let w = params.get(&format!("conv{b}.w"))?;
        let bias = params.get(&format!("conv{b}.b"))?;
        let mut y = tape.conv2d(x, w)?;
        y = tape.channel_bias_add(y, bias)?;
        if cfg.normalization == Normalization::BatchStat {
            let gamma = params.get(&format!("bn{b}.gamma"))?;
            let beta = params.get(&format!("bn{b}.beta"))?;
            y = tape.batch_norm(y, gamma, beta, BN_EPS)?;
        }
        y = tape.relu(y)?;
        y = tape.maxpool2(y)?;
        activations.push((format!("conv{b}"), y));
        x = y;
    }
    let features = tape.reshape(x, vec![n, cfg.feature_dim()])?;
    let hw = params.get("head.w")?;
    let hb = params.get("head.b")?;
    let z = tape.matmul(features, hw)?;
    let logits = tape.bias_add(z, hb)?;
    activations.push(("head".to_string(), logits));
    Ok(ForwardTrace { logits, features, activations })
}

fn forward_mlp(
    cfg: &MlpConfig,
    tape: &mut Tape,
    params: &NodeBinding,
    inputs: NodeId,
) -> Result<ForwardTrace> {
    let in_shape = tape.value(inputs).shape().to_vec();
    if in_shape.len() != 2 || in_shape[1] != cfg.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward_mlp",
            detail: format!("input {:?} vs input_dim {}", in_shape, cfg.input_dim),
        });
    }
    let mut x = inputs;
    let mut activations = Vec::new();
    for l in 1..=cfg.hidden.len() {
        let w = params.get(&format!("fc{l}.w"))?;
        let b = params.get(&format!("fc{l}.b"))?;
        let z = tape.matmul(x, w)?;
        let z = tape.bias_add(z, b)?;
        x = tape.relu(z)?;
        activations.push((format!("fc{l}"), x));
    }
    let features = x;
    let w = params.get("head.w")?;
    let b = params.get("head.b")?;
    let z = tape.matmul(features, w)?;
    let logits = tape.bias_add(z, b)?;
    activations.push(("head".to_string(), logits));
    Ok(ForwardTrace { logits, features, activations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    PreAdaptation,
    PostAdaptation,
}

/// Per-layer activation matrices captured for similarity analysis.
#[derive(Debug, Clone)]
pub struct ActivationDump {
    /// (layer name, activations); conv layers keep [N,C,H,W], head is [N,n_way].
    pub layers: Vec<(String, Tensor)>,
    pub phase: Phase,
    pub task_id: u64,
    pub seed: u64,
}

/// Run a forward pass and capture every layer's activations.
pub fn forward_with_activations(
    cfg: &ModelConfig,
    params: &ParamSet,
    inputs: &Tensor,
    phase: Phase,
    task_id: u64,
    seed: u64,
) -> Result<(Tensor, ActivationDump)> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape)?;
    let x = tape.leaf(inputs.clone())?;
    let trace = forward(cfg, &mut tape, &binding, x)?;
    let layers = trace
        .activations
        .iter()
        .map(|(name, id)| (name.clone(), tape.value(*id).clone()))
        .collect();
    Ok((
        tape.value(trace.logits).clone(),
        ActivationDump { layers, phase, task_id, seed },
    ))
}

// ---- checkpoint / activation-dump files -----------------------------------

pub const MLCK_MAGIC: &[u8; 4] = b"MLCK";
pub const MLAD_MAGIC: &[u8; 4] = b"MLAD";

pub fn write_checkpoint(path: &Path, cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    let mut records = vec![
        Record::text("__config", serde_json::to_string(cfg).expect("config serializes")),
        Record::text(
            "__head",
            serde_json::to_string(params.head_names()).expect("head names serialize"),
        ),
    ];
    for (name, t) in params.iter() {
        records.push(Record::tensor(name, t));
    }
    recordio::write_records(path, MLCK_MAGIC, &records)
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let records = recordio::read_records(path, MLCK_MAGIC)?;
    let cfg: ModelConfig = serde_json::from_str(recordio::find(&records, "__config")?.as_text()?)
        .map_err(|e| Error::BadFormat(format!("bad config echo: {e}")))?;
    let head: Vec<String> = serde_json::from_str(recordio::find(&records, "__head")?.as_text()?)
        .map_err(|e| Error::BadFormat(format!("bad head record: {e}")))?;
    let mut entries = Vec::new();
    for r in &records {
        if r.name.starts_with("__") {
            continue;
        }
        entries.push((r.name.clone(), r.as_tensor()?));
    }
    Ok((cfg, ParamSet::new(entries, head)?))
}

pub fn write_activation_dump(path: &Path, dump: &ActivationDump) -> Result<()> {
    let phase = match dump.phase {
        Phase::PreAdaptation => "pre",
        Phase::PostAdaptation => "post",
    };
    let meta = format!("{{\"phase\":\"{phase}\",\"task_id\":{},\"seed\":{}}}", dump.task_id, dump.seed);
    let mut records = vec![Record::text("__meta", meta)];
    for (name, t) in &dump.layers {
        records.push(Record::tensor(name, t));
    }
    recordio::write_records(path, MLAD_MAGIC, &records)
}

pub fn read_activation_dump(path: &Path) -> Result<ActivationDump> {
    let records = recordio::read_records(path, MLAD_MAGIC)?;
    let meta: serde_json::Value =
        serde_json::from_str(recordio::find(&records, "__meta")?.as_text()?)
            .map_err(|e| Error::BadFormat(format!("bad activation metadata: {e}")))?;
    let phase = match meta["phase"].as_str() {
        Some("pre") => Phase::PreAdaptation,
        Some("post") => Phase::PostAdaptation,
        _ => return Err(Error::BadFormat("bad phase tag".into())),
    };
    let mut layers = Vec::new();
    for r in &records {
        if r.name.starts_with("__") {
            continue;
        }
        layers.push((r.name.clone(), r.as_tensor()?));
    }
    Ok(ActivationDump {
        layers,
        phase,
        task_id: meta["task_id"].as_u64().unwrap_or(0),
        seed: meta["seed"].as_u64().unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_cfg() -> ModelConfig {
        ModelConfig::Conv(ConvConfig::default())
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let a = init_params(&default_cfg(), 7).unwrap();
        let b = init_params(&default_cfg(), 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&default_cfg(), 8).unwrap();
        assert_ne!(a, c);
        for b in 1..=4 {
            let bias = a.get(&format!("conv{b}.b")).unwrap();
            assert!(bias.data().iter().all(|&v| v == 0.0));
        }
        assert!(a.get("head.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_net_has_18_named_tensors() {
        let p = init_params(&default_cfg(), 0).unwrap();
        assert_eq!(p.len(), 18);
        let (body, head) = p.partition();
        assert_eq!(head, vec!["head.w".to_string(), "head.b".to_string()]);
        assert_eq!(body.len(), 16);
    }

    #[test]
    fn partition_exhaustive_and_disjoint() {
        let p = init_params(&default_cfg(), 0).unwrap();
        let (body, head) = p.partition();
        let mut all = body.clone();
        all.extend(head.clone());
        let mut names = p.names();
        all.sort();
        names.sort();
        assert_eq!(all, names);
        assert!(body.iter().all(|n| !head.contains(n)));
    }

    #[test]
    fn mlp_partition_head_is_last_layer() {
        let cfg = ModelConfig::Mlp(MlpConfig { input_dim: 2, hidden: vec![100, 100], output_dim: 2 });
        let p = init_params(&cfg, 0).unwrap();
        let (_, head) = p.partition();
        assert_eq!(head, vec!["head.w".to_string(), "head.b".to_string()]);
    }

    #[test]
    fn logits_shape_and_dump_layer_count() {
        let cfg = default_cfg();
        let p = init_params(&cfg, 1).unwrap();
        let x = Tensor::zeros(vec![5, 1, 20, 20]);
        let (logits, dump) = forward_with_activations(&cfg, &p, &x, Phase::PreAdaptation, 0, 1).unwrap();
        assert_eq!(logits.shape(), &[5, 5]);
        assert_eq!(dump.layers.len(), 5); // conv1..conv4, head
        assert_eq!(dump.layers[4].0, "head");
        for (_, t) in &dump.layers {
            assert_eq!(t.shape()[0], 5);
        }
    }

    #[test]
    fn spatial_collapse_rejected() {
        let cfg = ModelConfig::Conv(ConvConfig {
            blocks: 6,
            input: (1, 20, 20),
            ..ConvConfig::default()
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn batch_stat_normalization_is_scale_invariant() {
        // positive rescaling of the whole batch leaves post-BN activations of
        // the first block unchanged (up to eps effects)
        let cfg = ConvConfig::default();
        let p = init_params(&ModelConfig::Conv(cfg.clone()), 3).unwrap();
        let mut rng = SeedStream::new(4).rng();
        let data: Vec<f64> = (0..5 * 400).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x1 = Tensor::new(vec![5, 1, 20, 20], data.clone()).unwrap();
        let x2 = x1.scale(3.0);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let binding = p.bind(&mut tape).unwrap();
            let xid = tape.leaf(x.clone()).unwrap();
            let tr = forward_conv(&cfg, &mut tape, &binding, xid).unwrap();
            tape.value(tr.activations[0].1).clone()
        };
        let a = run(&x1);
        let b = run(&x2);
        // eps in the variance denominator breaks exact invariance
        assert!(a.max_abs_diff(&b) < 1e-2, "diff {}", a.max_abs_diff(&b));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = default_cfg();
        let p = init_params(&cfg, 5).unwrap();
        let dir = std::env::temp_dir().join("metalab_mlck_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ck.mlck");
        write_checkpoint(&path, &cfg, &p).unwrap();
        let (cfg2, p2) = read_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(p, p2);
    }
}
