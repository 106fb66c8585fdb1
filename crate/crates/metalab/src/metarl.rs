//! Policy-gradient meta-learning on a 2-D navigation task family.
//!
//! Each task is a goal position; the agent starts at the origin, takes
//! clipped 2-D actions, and is rewarded with the negative distance to the
//! goal. The policy is a Gaussian over actions with an MLP mean and a
//! learned state-independent log standard deviation. Inner adaptation is
//! one (or more) REINFORCE steps; the outer loop differentiates through
//! the inner update exactly as in the supervised track, so MAML-RL and
//! ANIL-RL reuse the same tape machinery.

use crate::algos::{clip_global_norm, Adam, Variant};
use crate::error::{Error, Result};
use crate::model::{self, MlpConfig, ModelConfig};
use crate::params::{GradMap, NodeBinding, ParamSet};
use crate::recordio;
use crate::rng::SeedStream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const LOG_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq)]
pub struct NavConfig {
    /// goals are uniform in [-goal_range, goal_range]^2
    pub goal_range: f64,
    pub action_clip: f64,
    pub state_clip: f64,
    pub horizon: usize,
    /// episode ends once the agent is this close to the goal
    pub terminate_radius: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        NavConfig {
            goal_range: 0.5,
            action_clip: 0.1,
            state_clip: 1.0,
            horizon: 20,
            terminate_radius: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavTask {
    pub goal: [f64; 2],
}

pub fn sample_task(cfg: &NavConfig, rng: &mut ChaCha8Rng) -> NavTask {
    NavTask {
        goal: [
            rng.gen_range(-cfg.goal_range..cfg.goal_range),
            rng.gen_range(-cfg.goal_range..cfg.goal_range),
        ],
    }
}

/// Policy parameters: an MLP trunk whose head outputs the action mean, plus
/// a state-independent `log_std`. `log_std` belongs to the body so ANIL's
/// head-only inner loop leaves exploration noise fixed per task.
pub fn init_policy(mlp: &MlpConfig, seed: u64) -> Result<ParamSet> {
    let base = model::init_params(&ModelConfig::Mlp(mlp.clone()), seed)?;
    let mut entries: Vec<(String, Tensor)> =
        base.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    // exp(-1.6) ~ 0.2: exploration on the scale of a couple of clipped steps
    entries.push(("log_std".to_string(), Tensor::full(vec![mlp.output_dim], -1.6)));
    ParamSet::new(entries, base.head_names().to_vec())
}

/// Mean action for one state, computed off-tape (sampling does not need
/// gradients).
fn policy_mean(mlp: &MlpConfig, params: &ParamSet, state: &[f64]) -> Result<Vec<f64>> {
    let mut x = Tensor::matrix(1, mlp.input_dim, state.to_vec())?;
    for l in 1..=mlp.hidden.len() {
        let w = params.get(&format!("fc{l}.w")).ok_or(Error::UnknownParam(format!("fc{l}.w")))?;
        let b = params.get(&format!("fc{l}.b")).ok_or(Error::UnknownParam(format!("fc{l}.b")))?;
        let mut z = x.matmul(w)?;
        for (j, zv) in z.data_mut().iter_mut().enumerate() {
            *zv += b.data()[j];
            if *zv < 0.0 {
                *zv = 0.0;
            }
        }
        x = z;
    }
    let w = params.get("head.w").ok_or(Error::UnknownParam("head.w".into()))?;
    let b = params.get("head.b").ok_or(Error::UnknownParam("head.b".into()))?;
    let mut z = x.matmul(w)?;
    for (j, zv) in z.data_mut().iter_mut().enumerate() {
        *zv += b.data()[j];
    }
    Ok(z.data().to_vec())
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// [L, 2] states visited before each action
    pub states: Tensor,
    /// [L, 2] unclipped sampled actions (log-probs are taken of these)
    pub actions: Tensor,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Sample one trajectory under the policy given by `params`.
pub fn rollout(
    mlp: &MlpConfig,
    params: &ParamSet,
    cfg: &NavConfig,
    task: &NavTask,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let log_std = params.get("log_std").ok_or(Error::UnknownParam("log_std".into()))?;
    let std: Vec<f64> = log_std.data().iter().map(|&v| v.exp()).collect();
    let mut s = [0.0f64, 0.0];
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    for _ in 0..cfg.horizon {
        let mean = policy_mean(mlp, params, &s)?;
        // Box-Muller, two gaussians per step
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = (-2.0 * u1.ln()).sqrt();
        let eps = [r * u2.cos(), r * u2.sin()];
        let a = [mean[0] + std[0] * eps[0], mean[1] + std[1] * eps[1]];
        states.extend_from_slice(&s);
        actions.extend_from_slice(&a);
        let step = [
            a[0].clamp(-cfg.action_clip, cfg.action_clip),
            a[1].clamp(-cfg.action_clip, cfg.action_clip),
        ];
        s = [
            (s[0] + step[0]).clamp(-cfg.state_clip, cfg.state_clip),
            (s[1] + step[1]).clamp(-cfg.state_clip, cfg.state_clip),
        ];
        let dist = ((s[0] - task.goal[0]).powi(2) + (s[1] - task.goal[1]).powi(2)).sqrt();
        rewards.push(-dist);
        if dist < cfg.terminate_radius {
            break;
        }
    }
    let l = rewards.len();
    Ok(Trajectory {
        states: Tensor::new(vec![l, 2], states)?,
        actions: Tensor::new(vec![l, 2], actions)?,
        rewards,
    })
}

/// Undiscounted reward-to-go.
pub fn reward_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc += rewards[i];
        out[i] = acc;
    }
    out
}

/// Advantages: reward-to-go minus its mean over every step in the batch.
pub fn batch_advantages(trajs: &[Trajectory]) -> Vec<Vec<f64>> {
    let rtg: Vec<Vec<f64>> = trajs.iter().map(|t| reward_to_go(&t.rewards)).collect();
    let total: f64 = rtg.iter().flatten().sum();
    let count: usize = rtg.iter().map(|r| r.len()).sum();
    let mean = if count > 0 { total / count as f64 } else { 0.0 };
    rtg.into_iter().map(|r| r.into_iter().map(|v| v - mean).collect()).collect()
}

fn policy_mean_on_tape(
    mlp: &MlpConfig,
    tape: &mut Tape,
    binding: &NodeBinding,
    states: NodeId,
) -> Result<NodeId> {
    let mut x = states;
    for l in 1..=mlp.hidden.len() {
        let w = binding.get(&format!("fc{l}.w"))?;
        let b = binding.get(&format!("fc{l}.b"))?;
        let z = tape.matmul(x, w)?;
        let z = tape.bias_add(z, b)?;
        x = tape.relu(z)?;
    }
    let w = binding.get("head.w")?;
    let b = binding.get("head.b")?;
    let z = tape.matmul(x, w)?;
    tape.bias_add(z, b)
}

/// REINFORCE surrogate on the tape:
/// `-(1/N) sum_t sum_h log pi(a_h | s_h) * A_h` over N trajectories.
pub fn pg_loss(
    mlp: &MlpConfig,
    tape: &mut Tape,
    binding: &NodeBinding,
    trajs: &[Trajectory],
    advantages: &[Vec<f64>],
) -> Result<NodeId> {
    if trajs.is_empty() {
        return Err(Error::Degenerate("policy gradient needs trajectories".into()));
    }
    let log_std = binding.get("log_std")?;
    let mut total: Option<NodeId> = None;
    for (traj, adv) in trajs.iter().zip(advantages) {
        let l = traj.rewards.len();
        let states = tape.constant(traj.states.clone())?;
        let actions = tape.constant(traj.actions.clone())?;
        let mean = policy_mean_on_tape(mlp, tape, binding, states)?;
        let ls_row = tape.broadcast_axis0(log_std, l)?;
        let neg_ls = tape.neg(ls_row)?;
        let inv_std = tape.exp(neg_ls)?;
        let diff = tape.sub(actions, mean)?;
        let z = tape.mul(diff, inv_std)?;
        let z2 = tape.mul(z, z)?;
        let half_z2 = tape.scale(z2, 0.5)?;
        let with_ls = tape.add(half_z2, ls_row)?;
        let nll = tape.add_scalar(with_ls, 0.5 * LOG_2PI)?;
        let logp = tape.neg(nll)?;
        let per_step = tape.sum_axis1(logp)?;
        let adv_node = tape.constant(Tensor::from_vec(adv.clone()))?;
        let weighted = tape.mul(per_step, adv_node)?;
        let s = tape.sum_all(weighted)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let t = total.expect("nonempty");
    let scaled = tape.scale(t, -1.0 / trajs.len() as f64)?;
    Ok(scaled)
}

#[derive(Debug, Clone)]
pub struct RlTrainConfig {
    pub variant: Variant,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub outer_lr: f64,
    pub task_batch: usize,
    /// trajectories per task and adaptation stage
    pub n_traj: usize,
    pub iterations: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl RlTrainConfig {
    pub fn desk_default(variant: Variant) -> RlTrainConfig {
        RlTrainConfig {
            variant,
            inner_lr: 0.1,
            inner_steps: 1,
            outer_lr: 1e-3,
            task_batch: 10,
            n_traj: 10,
            iterations: 120,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RlHistoryRow {
    pub iteration: usize,
    /// mean return of the unadapted policy
    pub pre_return: f64,
    /// mean return after inner adaptation
    pub post_return: f64,
    pub grad_norm: f64,
}

pub struct RlTrainOutput {
    /// parameters from the best-post-return iteration
    pub best_params: ParamSet,
    pub best_iteration: usize,
    pub best_return: f64,
    pub final_params: ParamSet,
    pub history: Vec<RlHistoryRow>,
}

fn mean_return(trajs: &[Trajectory]) -> f64 {
    if trajs.is_empty() {
        return 0.0;
    }
    trajs.iter().map(|t| t.total_return()).sum::<f64>() / trajs.len() as f64
}

/// Meta-gradient for one task: REINFORCE inner step(s) on the tape, fresh
/// rollouts under the adapted policy, REINFORCE surrogate as the meta loss.
/// Returns (pre-adaptation return, post-adaptation return, grads).
pub fn rl_task_grads(
    mlp: &MlpConfig,
    nav: &NavConfig,
    params: &ParamSet,
    task: &NavTask,
    cfg: &RlTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, GradMap)> {
    let mut tape = Tape::new();
    let mut binding = params.bind(&mut tape)?;
    let leaves: Vec<(String, NodeId)> =
        binding.iter().map(|(n, id)| (n.to_string(), id)).collect();
    let mask = cfg.variant.inner_mask(params);
    let first_order = cfg.variant.first_order();

    let mut pre_return = 0.0;
    let mut cur = params.clone();
    for step in 0..cfg.inner_steps {
        let trajs: Vec<Trajectory> = (0..cfg.n_traj)
            .map(|_| rollout(mlp, &cur, nav, task, rng))
            .collect::<Result<_>>()?;
        if step == 0 {
            pre_return = mean_return(&trajs);
        }
        let adv = batch_advantages(&trajs);
        let loss = pg_loss(mlp, &mut tape, &binding, &trajs, &adv)?;
        let wrt: Vec<NodeId> = mask.iter().map(|n| binding.get(n)).collect::<Result<_>>()?;
        let grads = tape.grad(loss, &wrt)?;
        for (name, g) in mask.iter().zip(grads) {
            let g = if first_order { tape.detach(g)? } else { g };
            let delta = tape.scale(g, cfg.inner_lr)?;
            let p = binding.get(name)?;
            let adapted = tape.sub(p, delta)?;
            binding.set(name, adapted);
        }
        cur = cur.from_binding(&tape, &binding)?;
    }

    let post_trajs: Vec<Trajectory> = (0..cfg.n_traj)
        .map(|_| rollout(mlp, &cur, nav, task, rng))
        .collect::<Result<_>>()?;
    let post_return = mean_return(&post_trajs);
    let adv = batch_advantages(&post_trajs);
    let meta_loss = pg_loss(mlp, &mut tape, &binding, &post_trajs, &adv)?;
    let ids: Vec<NodeId> = leaves.iter().map(|(_, id)| *id).collect();
    let grads = tape.grad(meta_loss, &ids)?;
    let mut map = GradMap::new();
    for ((name, _), g) in leaves.iter().zip(grads) {
        map.insert(name.clone(), tape.value(g).clone());
    }
    Ok((pre_return, post_return, map))
}

/// Outer loop with best-iterate selection on the post-adaptation return.
pub fn meta_train_rl(
    mlp: &MlpConfig,
    nav: &NavConfig,
    cfg: &RlTrainConfig,
) -> Result<RlTrainOutput> {
    let mut params = init_policy(mlp, cfg.seed)?;
    let mut opt = Adam::new(cfg.outer_lr);
    let mut rng = SeedStream::new(cfg.seed).derive("rl-train").rng();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(usize, f64, ParamSet)> = None;
    for iter in 1..=cfg.iterations {
        let mut total = GradMap::new();
        let mut pre_sum = 0.0;
        let mut post_sum = 0.0;
        for _ in 0..cfg.task_batch {
            let task = sample_task(nav, &mut rng);
            let (pre, post, grads) = rl_task_grads(mlp, nav, &params, &task, cfg, &mut rng)?;
            pre_sum += pre;
            post_sum += post;
            total.accumulate(&grads)?;
        }
        let b = cfg.task_batch as f64;
        let mean = clip_global_norm(&total.scale(1.0 / b), cfg.clip_norm);
        let grad_norm = mean.global_norm();
        params = opt.step(&params, &mean)?;
        let post_return = post_sum / b;
        history.push(RlHistoryRow { iteration: iter, pre_return: pre_sum / b, post_return, grad_norm });
        if best.as_ref().map_or(true, |(_, r, _)| post_return > *r) {
            best = Some((iter, post_return, params.clone()));
        }
    }
    let (best_iteration, best_return, best_params) = best.expect("at least one iteration");
    Ok(RlTrainOutput { best_params, best_iteration, best_return, final_params: params, history })
}

/// Post-adaptation return on fresh tasks: plain REINFORCE steps (no
/// meta-gradient) then rollouts under the adapted policy.
pub fn evaluate_rl(
    mlp: &MlpConfig,
    nav: &NavConfig,
    params: &ParamSet,
    cfg: &RlTrainConfig,
    n_tasks: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = SeedStream::new(seed).derive("rl-eval").rng();
    let mask = cfg.variant.inner_mask(params);
    let mut pre_sum = 0.0;
    let mut post_sum = 0.0;
    for _ in 0..n_tasks {
        let task = sample_task(nav, &mut rng);
        let mut cur = params.clone();
        for step in 0..cfg.inner_steps {
            let trajs: Vec<Trajectory> = (0..cfg.n_traj)
                .map(|_| rollout(mlp, &cur, nav, &task, &mut rng))
                .collect::<Result<_>>()?;
            if step == 0 {
                pre_sum += mean_return(&trajs);
            }
            let adv = batch_advantages(&trajs);
            let mut tape = Tape::new();
            let binding = cur.bind(&mut tape)?;
            let loss = pg_loss(mlp, &mut tape, &binding, &trajs, &adv)?;
            let ids: Vec<NodeId> = mask.iter().map(|n| binding.get(n)).collect::<Result<_>>()?;
            let grads = tape.grad(loss, &ids)?;
            let mut map = GradMap::new();
            for (name, g) in mask.iter().zip(grads) {
                map.insert(name.clone(), tape.value(g).clone());
            }
            cur = crate::params::apply_update(&cur, &map, cfg.inner_lr, &mask)?;
        }
        let trajs: Vec<Trajectory> = (0..cfg.n_traj)
            .map(|_| rollout(mlp, &cur, nav, &task, &mut rng))
            .collect::<Result<_>>()?;
        post_sum += mean_return(&trajs);
    }
    Ok((pre_sum / n_tasks as f64, post_sum / n_tasks as f64))
}

pub const RL_CSV_HEADER: &str = "# metalab rl v1\niteration,pre_return,post_return,grad_norm";

pub fn write_rl_history_csv(path: &Path, rows: &[RlHistoryRow]) -> Result<()> {
    let mut s = String::from(RL_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.iteration, r.pre_return, r.post_return, r.grad_norm
        ));
    }
    recordio::atomic_write(path, s.as_bytes())
}

pub fn default_policy_mlp() -> MlpConfig {
    MlpConfig { input_dim: 2, hidden: vec![100, 100], output_dim: 2 }
}
