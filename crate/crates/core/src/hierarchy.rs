//! Manager and worker policies, imagined rollouts, and their
//! REINFORCE-with-baseline updates.
//!
//! The manager picks a goal code every K imagined steps and is credited with
//! the predicted extrinsic reward; the worker acts every step and is credited
//! with [`worker_goal_reward`] toward the current decoded goal.

use rand::Rng;

use crate::env::NUM_ACTIONS;
use crate::error::{dim_err, Error, Result};
use crate::goal_codec::{sample_factored, GoalCode, GoalCodec, GoalVector, SampleMode};
use crate::nn::{clip_global_norm, log_softmax, softmax, Activation, Adam, Mlp, ParameterSet, Tensor};
use crate::world_model::{LatentState, WorldModel};

/// Policy output layers start this much smaller than the default init, so
/// fresh policies are close to uniform.
pub const POLICY_HEAD_SCALE: f64 = 0.01;

/// `s . g / max(|g|^2, eps)`: 1 when `s == g`, 0 when orthogonal, linear in `s`.
pub fn worker_goal_reward(s: &[f64], g: &[f64]) -> f64 {
    const EPS: f64 = 1e-6;
    let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
    let norm2: f64 = g.iter().map(|v| v * v).sum();
    dot / norm2.max(EPS)
}

/// Policy over factored goal codes.
#[derive(Clone, Debug)]
pub struct Manager {
    pub net: Mlp,
    factors: usize,
    classes: usize,
    optimizer: Adam,
}

impl Manager {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden: usize,
        factors: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Mlp::new("manager", &[latent_dim, hidden, factors * classes], Activation::Tanh, rng)?;
        net.scale_output_layer(POLICY_HEAD_SCALE);
        Ok(Self::from_net(net, factors, classes))
    }

    pub fn from_net(net: Mlp, factors: usize, classes: usize) -> Self {
        let optimizer = Adam::new(net.params());
        Self {
            net,
            factors,
            classes,
            optimizer,
        }
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        self.net.set_params(params)?;
        self.optimizer = Adam::new(self.net.params());
        Ok(())
    }

    pub fn logits(&self, s: &LatentState) -> Result<Vec<f64>> {
        if s.dim() != self.net.input_dim() {
            return Err(dim_err(
                "Manager::logits",
                format!("latent of dimension {} (expected {})", s.dim(), self.net.input_dim()),
            ));
        }
        let out = self.net.forward_vec(&s.0)?;
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Usage("manager produced non-finite logits".into()));
        }
        Ok(out)
    }

    pub fn manager_sample<R: Rng + ?Sized>(
        &self,
        s: &LatentState,
        rng: &mut R,
        mode: SampleMode,
    ) -> Result<GoalCode> {
        let logits = self.logits(s)?;
        GoalCode::new(sample_factored(&logits, self.classes, rng, mode), self.classes)
    }

    pub fn log_prob(&self, s: &LatentState, z: &GoalCode) -> Result<f64> {
        let logits = self.logits(s)?;
        Ok(logits
            .chunks(self.classes)
            .zip(z.indices())
            .map(|(chunk, &i)| log_softmax(chunk)[i])
            .sum())
    }
}

/// Goal-conditioned policy over primitive actions.
#[derive(Clone, Debug)]
pub struct Worker {
    pub net: Mlp,
    optimizer: Adam,
}

impl Worker {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut net = Mlp::new("worker", &[2 * latent_dim, hidden, NUM_ACTIONS], Activation::Tanh, rng)?;
        net.scale_output_layer(POLICY_HEAD_SCALE);
        Ok(Self::from_net(net))
    }

    pub fn from_net(net: Mlp) -> Self {
        let optimizer = Adam::new(net.params());
        Self { net, optimizer }
    }

    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        self.net.set_params(params)?;
        self.optimizer = Adam::new(self.net.params());
        Ok(())
    }

    fn input(&self, s: &LatentState, g: &GoalVector) -> Result<Vec<f64>> {
        if s.dim() + g.dim() != self.net.input_dim() {
            return Err(dim_err(
                "Worker::input",
                format!(
                    "latent {} + goal {} does not match input width {}",
                    s.dim(),
                    g.dim(),
                    self.net.input_dim()
                ),
            ));
        }
        let mut v = Vec::with_capacity(self.net.input_dim());
        v.extend_from_slice(&s.0);
        v.extend_from_slice(&g.0);
        Ok(v)
    }

    pub fn logits(&self, s: &LatentState, g: &GoalVector) -> Result<Vec<f64>> {
        self.net.forward_vec(&self.input(s, g)?)
    }

    pub fn action_probs(&self, s: &LatentState, g: &GoalVector) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(s, g)?))
    }

    pub fn worker_act<R: Rng + ?Sized>(
        &self,
        s: &LatentState,
        g: &GoalVector,
        rng: &mut R,
        mode: SampleMode,
    ) -> Result<usize> {
        let logits = self.logits(s, g)?;
        Ok(sample_factored(&logits, NUM_ACTIONS, rng, mode)[0])
    }
}

/// Rollout under the frozen world model and current policies.
#[derive(Clone, Debug, PartialEq)]
pub struct ImaginedTrajectory {
    /// `H + 1` latents.
    pub states: Vec<LatentState>,
    /// `H` actions.
    pub actions: Vec<usize>,
    /// One goal per segment of K steps.
    pub goals: Vec<GoalVector>,
    pub codes: Vec<GoalCode>,
    /// `H` rewards predicted for each imagined step.
    pub predicted_rewards: Vec<f64>,
}

impl ImaginedTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Imagines `horizon` steps from each start state. The manager re-samples a
/// goal at every multiple of `goal_interval`.
#[allow(clippy::too_many_arguments)]
pub fn imagine<R: Rng + ?Sized>(
    start_states: &[LatentState],
    horizon: usize,
    goal_interval: usize,
    world_model: &WorldModel,
    codec: &GoalCodec,
    manager: &Manager,
    worker: &Worker,
    rng: &mut R,
    mode: SampleMode,
) -> Result<Vec<ImaginedTrajectory>> {
    if goal_interval == 0 {
        return Err(Error::Config("goal interval must be positive".into()));
    }
    start_states
        .iter()
        .map(|start| {
            let mut traj = ImaginedTrajectory {
                states: vec![start.clone()],
                actions: Vec::with_capacity(horizon),
                goals: Vec::new(),
                codes: Vec::new(),
                predicted_rewards: Vec::with_capacity(horizon),
            };
            let mut s = start.clone();
            for t in 0..horizon {
                if t % goal_interval == 0 {
                    let z = manager.manager_sample(&s, rng, mode)?;
                    traj.goals.push(codec.decode_goal(&z)?);
                    traj.codes.push(z);
                }
                let g = traj.goals.last().expect("goal set at t = 0");
                let a = worker.worker_act(&s, g, rng, mode)?;
                let next = world_model.predict_next(&s, a)?;
                traj.predicted_rewards.push(world_model.predict_reward(&next)?);
                traj.actions.push(a);
                traj.states.push(next.clone());
                s = next;
            }
            Ok(traj)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyGradientConfig {
    pub gamma: f64,
    pub goal_interval: usize,
    pub entropy_weight: f64,
    pub grad_clip: f64,
}

impl Default for PolicyGradientConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            goal_interval: 8,
            entropy_weight: 0.01,
            grad_clip: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HierarchyLosses {
    pub manager_pg: f64,
    pub worker_pg: f64,
}

/// Subtracts the per-index batch mean from `returns[traj][index]`, then
/// divides by the pooled standard deviation when it exceeds 1 (small reward
/// noise is left unamplified).
fn advantages(returns: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let width = returns.iter().map(Vec::len).max().unwrap_or(0);
    let mut means = vec![0.0; width];
    let mut counts = vec![0usize; width];
    for r in returns {
        for (i, v) in r.iter().enumerate() {
            means[i] += v;
            counts[i] += 1;
        }
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        *m /= (*c).max(1) as f64;
    }
    let centered: Vec<Vec<f64>> = returns
        .iter()
        .map(|r| r.iter().enumerate().map(|(i, v)| v - means[i]).collect())
        .collect();
    let n = counts.iter().sum::<usize>().max(1) as f64;
    let var = centered.iter().flatten().map(|a| a * a).sum::<f64>() / n;
    let scale = var.sqrt().max(1.0);
    centered
        .into_iter()
        .map(|r| r.into_iter().map(|a| a / scale).collect())
        .collect()
}

/// Return-to-go per goal decision: segment reward sums discounted by
/// `gamma^K` between decisions.
pub fn manager_returns(traj: &ImaginedTrajectory, gamma: f64, goal_interval: usize) -> Vec<f64> {
    let segment_sums: Vec<f64> = traj
        .predicted_rewards
        .chunks(goal_interval)
        .map(|c| c.iter().sum())
        .collect();
    let decision_discount = gamma.powi(goal_interval as i32);
    let mut out = vec![0.0; segment_sums.len()];
    let mut acc = 0.0;
    for j in (0..segment_sums.len()).rev() {
        acc = segment_sums[j] + decision_discount * acc;
        out[j] = acc;
    }
    out
}

/// Discounted worker reward-to-go, restarted at every segment boundary.
pub fn worker_returns(traj: &ImaginedTrajectory, gamma: f64, goal_interval: usize) -> Vec<f64> {
    let h = traj.horizon();
    let rewards: Vec<f64> = (0..h)
        .map(|t| worker_goal_reward(&traj.states[t + 1].0, &traj.goals[t / goal_interval].0))
        .collect();
    let mut out = vec![0.0; h];
    for seg_start in (0..h).step_by(goal_interval) {
        let seg_end = (seg_start + goal_interval).min(h);
        let mut acc = 0.0;
        for t in (seg_start..seg_end).rev() {
            acc = rewards[t] + gamma * acc;
            out[t] = acc;
        }
    }
    out
}

/// Policy-gradient surrogate `-(1/N) sum A log pi - beta (1/N) sum H` and
/// its gradient with respect to a batch of logits rows.
fn pg_surrogate(
    logits_rows: &[Vec<f64>],
    choices: &[Vec<usize>],
    advantages: &[f64],
    classes: usize,
    entropy_weight: f64,
) -> (f64, Vec<f64>) {
    let n = logits_rows.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits_rows.len() * logits_rows.first().map_or(0, Vec::len));
    for ((row, choice), &adv) in logits_rows.iter().zip(choices).zip(advantages) {
        for (chunk, &c) in row.chunks(classes).zip(choice) {
            let logp = log_softmax(chunk);
            let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let entropy: f64 = -p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
            loss += -adv * logp[c] / n - entropy_weight * entropy / n;
            for k in 0..classes {
                let indicator = if k == c { 1.0 } else { 0.0 };
                let d_logp = indicator - p[k];
                let d_entropy = -p[k] * (logp[k] + entropy);
                grad.push(-adv * d_logp / n - entropy_weight * d_entropy / n);
            }
        }
    }
    (loss, grad)
}

struct PgBatch {
    inputs: Vec<Vec<f64>>,
    choices: Vec<Vec<usize>>,
    advantages: Vec<f64>,
}

fn manager_batch(trajs: &[ImaginedTrajectory], cfg: &PolicyGradientConfig) -> PgBatch {
    let returns: Vec<Vec<f64>> = trajs
        .iter()
        .map(|t| manager_returns(t, cfg.gamma, cfg.goal_interval))
        .collect();
    let adv = advantages(&returns);
    let mut batch = PgBatch {
        inputs: Vec::new(),
        choices: Vec::new(),
        advantages: Vec::new(),
    };
    for (traj, a) in trajs.iter().zip(adv) {
        for (j, code) in traj.codes.iter().enumerate() {
            batch.inputs.push(traj.states[j * cfg.goal_interval].0.clone());
            batch.choices.push(code.indices().to_vec());
            batch.advantages.push(a[j]);
        }
    }
    batch
}

fn worker_batch(trajs: &[ImaginedTrajectory], cfg: &PolicyGradientConfig) -> PgBatch {
    let returns: Vec<Vec<f64>> = trajs
        .iter()
        .map(|t| worker_returns(t, cfg.gamma, cfg.goal_interval))
        .collect();
    let adv = advantages(&returns);
    let mut batch = PgBatch {
        inputs: Vec::new(),
        choices: Vec::new(),
        advantages: Vec::new(),
    };
    for (traj, a) in trajs.iter().zip(adv) {
        for t in 0..traj.horizon() {
            let mut input = traj.states[t].0.clone();
            input.extend_from_slice(&traj.goals[t / cfg.goal_interval].0);
            batch.inputs.push(input);
            batch.choices.push(vec![traj.actions[t]]);
            batch.advantages.push(a[t]);
        }
    }
    batch
}

fn pg_loss_and_gradient(
    net: &Mlp,
    batch: &PgBatch,
    classes: usize,
    entropy_weight: f64,
) -> Result<(f64, ParameterSet)> {
    let mut grads = net.params().zeros_like();
    if batch.inputs.is_empty() {
        return Ok((0.0, grads));
    }
    let cache = net.forward_cached(&Tensor::from_rows(&batch.inputs)?)?;
    let out = cache.output();
    let rows: Vec<Vec<f64>> = (0..out.rows()).map(|i| out.row(i).to_vec()).collect();
    let (loss, g) = pg_surrogate(&rows, &batch.choices, &batch.advantages, classes, entropy_weight);
    net.backward_into(&cache, &Tensor::vector(g), &mut grads)?;
    Ok((loss, grads))
}

fn pg_loss(net: &Mlp, batch: &PgBatch, classes: usize, entropy_weight: f64) -> Result<f64> {
    if batch.inputs.is_empty() {
        return Ok(0.0);
    }
    let out = net.forward(&Tensor::from_rows(&batch.inputs)?)?;
    let rows: Vec<Vec<f64>> = (0..out.rows()).map(|i| out.row(i).to_vec()).collect();
    Ok(pg_surrogate(&rows, &batch.choices, &batch.advantages, classes, entropy_weight).0)
}

impl Manager {
    pub fn pg_loss_and_gradient(
        &self,
        trajs: &[ImaginedTrajectory],
        cfg: &PolicyGradientConfig,
    ) -> Result<(f64, ParameterSet)> {
        pg_loss_and_gradient(&self.net, &manager_batch(trajs, cfg), self.classes, cfg.entropy_weight)
    }

    pub fn pg_loss(&self, trajs: &[ImaginedTrajectory], cfg: &PolicyGradientConfig) -> Result<f64> {
        pg_loss(&self.net, &manager_batch(trajs, cfg), self.classes, cfg.entropy_weight)
    }

    fn apply(&mut self, mut grads: ParameterSet, lr: f64, clip: f64) -> Result<()> {
        clip_global_norm(&mut [&mut grads], clip);
        self.optimizer.step(self.net.params_mut(), &grads, lr)
    }
}

impl Worker {
    pub fn pg_loss_and_gradient(
        &self,
        trajs: &[ImaginedTrajectory],
        cfg: &PolicyGradientConfig,
    ) -> Result<(f64, ParameterSet)> {
        pg_loss_and_gradient(&self.net, &worker_batch(trajs, cfg), NUM_ACTIONS, cfg.entropy_weight)
    }

    pub fn pg_loss(&self, trajs: &[ImaginedTrajectory], cfg: &PolicyGradientConfig) -> Result<f64> {
        pg_loss(&self.net, &worker_batch(trajs, cfg), NUM_ACTIONS, cfg.entropy_weight)
    }

    fn apply(&mut self, mut grads: ParameterSet, lr: f64, clip: f64) -> Result<()> {
        clip_global_norm(&mut [&mut grads], clip);
        self.optimizer.step(self.net.params_mut(), &grads, lr)
    }
}

/// One REINFORCE-with-baseline step on both policies.
pub fn update_hierarchy(
    manager: &mut Manager,
    worker: &mut Worker,
    trajs: &[ImaginedTrajectory],
    lr_manager: f64,
    lr_worker: f64,
    cfg: &PolicyGradientConfig,
) -> Result<HierarchyLosses> {
    let (manager_pg, mg) = manager.pg_loss_and_gradient(trajs, cfg)?;
    let (worker_pg, wg) = worker.pg_loss_and_gradient(trajs, cfg)?;
    manager.apply(mg, lr_manager, cfg.grad_clip)?;
    worker.apply(wg, lr_worker, cfg.grad_clip)?;
    Ok(HierarchyLosses {
        manager_pg,
        worker_pg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_model_gradients;
    use crate::world_model::WorldModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn uniform_manager(dim: usize, factors: usize, classes: usize) -> Manager {
        let net = Mlp::zeros("manager", &[dim, 4, factors * classes], Activation::Tanh).unwrap();
        Manager::from_net(net, factors, classes)
    }

    fn within_three_sigma(counts: &[usize], draws: usize) {
        let p = 1.0 / counts.len() as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn goal_reward_algebra() {
        let g = [1.0, -2.0, 0.5];
        assert!((worker_goal_reward(&g, &g) - 1.0).abs() < 1e-12);
        assert_eq!(worker_goal_reward(&[2.0, 1.0, 0.0], &g), 0.0);
        let s2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        assert!((worker_goal_reward(&s2, &g) - 2.0).abs() < 1e-12);
        let s = [0.3, 0.1, -0.7];
        let s3: Vec<f64> = s.iter().map(|v| 3.0 * v).collect();
        assert!((worker_goal_reward(&s3, &g) - 3.0 * worker_goal_reward(&s, &g)).abs() < 1e-12);
        // zero goal is guarded
        assert_eq!(worker_goal_reward(&s, &[0.0; 3]), 0.0);
    }

    #[test]
    fn manager_codes_are_one_hot_and_greedy_is_stable() {
        let m = Manager::new(5, 8, 4, 8, &mut rng(0)).unwrap();
        let s = LatentState(vec![0.3, -0.2, 0.1, 0.9, -1.0]);
        let mut r = rng(1);
        for _ in 0..20 {
            let z = m.manager_sample(&s, &mut r, SampleMode::Sample).unwrap();
            assert!(z.factors().iter().all(|f| f.iter().sum::<f64>() == 1.0));
        }
        let a = m.manager_sample(&s, &mut rng(2), SampleMode::Greedy).unwrap();
        let b = m.manager_sample(&s, &mut rng(3), SampleMode::Greedy).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_manager_samples_uniformly() {
        let m = uniform_manager(3, 2, 4);
        let s = LatentState(vec![0.5, 0.5, 0.5]);
        let mut r = rng(4);
        let draws = 10_000;
        let mut counts = vec![vec![0usize; 4]; 2];
        for _ in 0..draws {
            let z = m.manager_sample(&s, &mut r, SampleMode::Sample).unwrap();
            for (f, &i) in z.indices().iter().enumerate() {
                counts[f][i] += 1;
            }
        }
        for c in counts {
            within_three_sigma(&c, draws);
        }
    }

    #[test]
    fn worker_actions() {
        let w = Worker::new(3, 8, &mut rng(5)).unwrap();
        let s = LatentState(vec![0.1, 0.2, 0.3]);
        let g = GoalVector(vec![1.0, 0.0, -1.0]);
        let mut r = rng(6);
        for _ in 0..50 {
            assert!(w.worker_act(&s, &g, &mut r, SampleMode::Sample).unwrap() < NUM_ACTIONS);
        }
        let a = w.worker_act(&s, &g, &mut rng(7), SampleMode::Greedy).unwrap();
        let b = w.worker_act(&s, &g, &mut rng(8), SampleMode::Greedy).unwrap();
        assert_eq!(a, b);

        let uniform = Worker::from_net(Mlp::zeros("worker", &[6, 4, 3], Activation::Tanh).unwrap());
        let draws = 10_000;
        let mut counts = vec![0usize; 3];
        for _ in 0..draws {
            counts[uniform.worker_act(&s, &g, &mut r, SampleMode::Sample).unwrap()] += 1;
        }
        within_three_sigma(&counts, draws);
    }

    fn imagination_fixture() -> (WorldModel, GoalCodec, Manager, Worker) {
        let mut r = rng(9);
        let wm = WorldModel::new(WorldModelDims::new(6, 8), &mut r).unwrap();
        let codec = GoalCodec::new(6, 8, 2, 3, &mut r).unwrap();
        let manager = Manager::new(6, 8, 2, 3, &mut r).unwrap();
        let worker = Worker::new(6, 8, &mut r).unwrap();
        (wm, codec, manager, worker)
    }

    #[test]
    fn imagination_shapes() {
        let (wm, codec, manager, worker) = imagination_fixture();
        let starts = vec![LatentState(vec![0.1; 6]), LatentState(vec![-0.2; 6])];
        let mut r = rng(10);
        let zero = imagine(&starts, 0, 8, &wm, &codec, &manager, &worker, &mut r, SampleMode::Sample).unwrap();
        assert_eq!(zero[0].states.len(), 1);
        assert!(zero[0].actions.is_empty());

        let trajs = imagine(&starts, 16, 8, &wm, &codec, &manager, &worker, &mut r, SampleMode::Sample).unwrap();
        for t in &trajs {
            assert_eq!(t.states.len(), 17);
            assert_eq!(t.actions.len(), 16);
            assert_eq!(t.predicted_rewards.len(), 16);
            assert_eq!(t.goals.len(), 2);
            assert_eq!(t.codes.len(), 2);
        }
    }

    #[test]
    fn greedy_imagination_is_deterministic() {
        let (wm, codec, manager, worker) = imagination_fixture();
        let starts = vec![LatentState(vec![0.3; 6])];
        let a = imagine(&starts, 16, 8, &wm, &codec, &manager, &worker, &mut rng(1), SampleMode::Greedy).unwrap();
        let b = imagine(&starts, 16, 8, &wm, &codec, &manager, &worker, &mut rng(2), SampleMode::Greedy).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manager_returns_discount_between_decisions() {
        let (wm, codec, manager, worker) = imagination_fixture();
        let mut t = imagine(&[LatentState(vec![0.0; 6])], 4, 2, &wm, &codec, &manager, &worker, &mut rng(3), SampleMode::Greedy)
            .unwrap()
            .remove(0);
        t.predicted_rewards = vec![1.0, 0.0, 0.5, 0.5];
        let r = manager_returns(&t, 0.9, 2);
        assert!((r[1] - 1.0).abs() < 1e-12);
        assert!((r[0] - (1.0 + 0.81 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn equal_returns_give_zero_advantage_gradient() {
        let (wm, codec, manager, worker) = imagination_fixture();
        let starts = vec![LatentState(vec![0.2; 6]); 4];
        let mut trajs = imagine(&starts, 8, 4, &wm, &codec, &manager, &worker, &mut rng(4), SampleMode::Sample).unwrap();
        for t in &mut trajs {
            t.predicted_rewards.iter_mut().for_each(|r| *r = 0.25);
        }
        let cfg = PolicyGradientConfig {
            gamma: 0.99,
            goal_interval: 4,
            entropy_weight: 0.0,
            grad_clip: f64::INFINITY,
        };
        let (_, g) = manager.pg_loss_and_gradient(&trajs, &cfg).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn policy_gradients_match_finite_differences() {
        let (wm, codec, mut manager, mut worker) = imagination_fixture();
        let starts: Vec<LatentState> = (0..3).map(|i| LatentState(vec![0.1 * i as f64 - 0.1; 6])).collect();
        let mut trajs = imagine(&starts, 4, 2, &wm, &codec, &manager, &worker, &mut rng(5), SampleMode::Sample).unwrap();
        for (i, t) in trajs.iter_mut().enumerate() {
            t.predicted_rewards[1] = i as f64;
        }
        let cfg = PolicyGradientConfig {
            gamma: 0.9,
            goal_interval: 2,
            entropy_weight: 0.05,
            grad_clip: f64::INFINITY,
        };
        let (_, mg) = manager.pg_loss_and_gradient(&trajs, &cfg).unwrap();
        let report = check_model_gradients(
            &mut manager,
            &[mg],
            |m: &mut Manager| vec![m.net.params_mut()],
            |m: &Manager| m.pg_loss(&trajs, &cfg).unwrap(),
            None,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
        let (_, wg) = worker.pg_loss_and_gradient(&trajs, &cfg).unwrap();
        let report = check_model_gradients(
            &mut worker,
            &[wg],
            |w: &mut Worker| vec![w.net.params_mut()],
            |w: &Worker| w.pg_loss(&trajs, &cfg).unwrap(),
            None,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    /// One-decision bandit: goal class 0 earns 1, class 1 earns 0.
    fn bandit_batch(manager: &Manager, s: &LatentState, r: &mut ChaCha8Rng, n: usize) -> Vec<ImaginedTrajectory> {
        (0..n)
            .map(|_| {
                let z = manager.manager_sample(s, r, SampleMode::Sample).unwrap();
                let reward = if z.indices()[0] == 0 { 1.0 } else { 0.0 };
                ImaginedTrajectory {
                    states: vec![s.clone(), s.clone()],
                    actions: vec![0],
                    goals: vec![GoalVector(vec![1.0; s.dim()])],
                    codes: vec![z],
                    predicted_rewards: vec![reward],
                }
            })
            .collect()
    }

    #[test]
    fn manager_learns_the_better_goal() {
        let mut manager = Manager::new(4, 8, 1, 2, &mut rng(11)).unwrap();
        let mut worker = Worker::new(4, 8, &mut rng(12)).unwrap();
        let s = LatentState(vec![0.5, -0.5, 0.25, 1.0]);
        let cfg = PolicyGradientConfig {
            goal_interval: 1,
            ..Default::default()
        };
        let a = GoalCode::new(vec![0], 2).unwrap();
        let mut r = rng(13);

        // single-step sign check
        let before = manager.log_prob(&s, &a).unwrap();
        let batch = bandit_batch(&manager, &s, &mut r, 16);
        update_hierarchy(&mut manager, &mut worker, &batch, 1e-2, 0.0, &cfg).unwrap();
        assert!(manager.log_prob(&s, &a).unwrap() > before);

        for _ in 1..200 {
            let batch = bandit_batch(&manager, &s, &mut r, 16);
            update_hierarchy(&mut manager, &mut worker, &batch, 1e-2, 0.0, &cfg).unwrap();
        }
        let p = manager.log_prob(&s, &a).unwrap().exp();
        assert!(p > 0.9, "{p}");
    }

    #[test]
    fn worker_learns_the_goal_reaching_action() {
        let mut manager = Manager::new(4, 8, 1, 2, &mut rng(14)).unwrap();
        let mut worker = Worker::new(4, 8, &mut rng(15)).unwrap();
        let s = LatentState(vec![0.0, 0.0, 0.0, 0.0]);
        let g = GoalVector(vec![1.0, 0.5, -0.5, 0.25]);
        let cfg = PolicyGradientConfig {
            goal_interval: 1,
            ..Default::default()
        };
        let mut r = rng(16);
        for _ in 0..200 {
            let batch: Vec<ImaginedTrajectory> = (0..16)
                .map(|_| {
                    let a = worker.worker_act(&s, &g, &mut r, SampleMode::Sample).unwrap();
                    // action 0 lands on the goal; others stay put
                    let next = if a == 0 { LatentState(g.0.clone()) } else { s.clone() };
                    ImaginedTrajectory {
                        states: vec![s.clone(), next],
                        actions: vec![a],
                        goals: vec![g.clone()],
                        codes: vec![GoalCode::new(vec![0], 2).unwrap()],
                        predicted_rewards: vec![0.0],
                    }
                })
                .collect();
            update_hierarchy(&mut manager, &mut worker, &batch, 0.0, 1e-2, &cfg).unwrap();
        }
        let p = worker.action_probs(&s, &g).unwrap()[0];
        assert!(p > 0.9, "{p}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn goal_reward_permutation_invariant(
                pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..10),
                seed in 0u64..100,
            ) {
                use rand::seq::SliceRandom;
                let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                let g: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                let mut perm: Vec<usize> = (0..s.len()).collect();
                perm.shuffle(&mut rng(seed));
                let sp: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
                let gp: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
                let a = worker_goal_reward(&s, &g);
                let b = worker_goal_reward(&sp, &gp);
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }

            #[test]
            fn goals_change_only_at_multiples_of_k(seed in 0u64..200, k in 1usize..6, segs in 1usize..4) {
                let (wm, codec, manager, worker) = imagination_fixture();
                let h = k * segs;
                let t = imagine(&[LatentState(vec![0.1; 6])], h, k, &wm, &codec, &manager, &worker, &mut rng(seed), SampleMode::Sample).unwrap();
                prop_assert_eq!(t[0].goals.len(), segs);
                prop_assert_eq!(t[0].codes.len(), segs);
            }
        }
    }
}
