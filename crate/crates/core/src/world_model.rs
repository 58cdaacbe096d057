//! Primitive latent world model: representation, dynamics, observation
//! decoder and reward predictor over single environment steps.
//!
//! Latents are deterministic. The representation network sees the previous
//! latent and action alongside the new observation, which makes it recurrent
//! without a dedicated cell.

use rand::Rng;

use crate::env::{Observation, NUM_ACTIONS, OBS_LEN};
use crate::error::{dim_err, Result};
use crate::nn::{clip_global_norm, mse, Activation, Adam, Mlp, ParameterSet, Tensor};
use crate::replay::StoredTransition;

/// One-hot width for actions: the three environment actions plus a null
/// action used at episode (or sequence) start.
pub const ACTION_SLOTS: usize = NUM_ACTIONS + 1;
pub const NULL_ACTION: usize = NUM_ACTIONS;

/// Model state `s_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState(pub Vec<f64>);

impl LatentState {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn action_one_hot(action: usize) -> [f64; ACTION_SLOTS] {
    let mut v = [0.0; ACTION_SLOTS];
    v[action.min(NULL_ACTION)] = 1.0;
    v
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldModelDims {
    pub latent: usize,
    pub hidden: usize,
    pub observation: usize,
}

impl WorldModelDims {
    pub fn new(latent: usize, hidden: usize) -> Self {
        Self {
            latent,
            hidden,
            observation: OBS_LEN,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub dynamics: f64,
    pub reward: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            dynamics: 1.0,
            reward: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WorldModelLosses {
    pub recon: f64,
    pub dynamics: f64,
    pub reward: f64,
}

impl WorldModelLosses {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.recon * self.recon + w.dynamics * self.dynamics + w.reward * self.reward
    }
}

/// Output of one world-model update: the loss components and the (detached)
/// latents of every step in the batch, for the codec and imagination.
#[derive(Clone, Debug)]
pub struct WorldModelUpdate {
    pub losses: WorldModelLosses,
    pub states: Vec<LatentState>,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub repr: Mlp,
    pub dynamics: Mlp,
    pub decoder: Mlp,
    pub reward: Mlp,
    pub weights: LossWeights,
    pub grad_clip: f64,
    dims: WorldModelDims,
    optimizers: Vec<Adam>,
}

/// Per-batch forward state used by the loss and its gradient.
struct SequenceForward {
    batch: usize,
    steps: usize,
    repr_caches: Vec<crate::nn::ForwardCache>,
    /// `[t][b]` latents, `t` in `0..=steps`.
    states: Vec<Vec<Vec<f64>>>,
    losses: WorldModelLosses,
    recon_cache: crate::nn::ForwardCache,
    recon_grad: Vec<f64>,
    dyn_cache: crate::nn::ForwardCache,
    dyn_grad: Vec<f64>,
    rew_cache: crate::nn::ForwardCache,
    rew_grad: Vec<f64>,
}

impl WorldModel {
    pub fn new<R: Rng + ?Sized>(dims: WorldModelDims, rng: &mut R) -> Result<Self> {
        let d = dims.latent;
        let h = dims.hidden;
        let repr = Mlp::new("repr", &[d + ACTION_SLOTS + dims.observation, h, d], Activation::Tanh, rng)?;
        let dynamics = Mlp::new("dyn", &[d + ACTION_SLOTS, h, d], Activation::Tanh, rng)?;
        let decoder = Mlp::new("rec", &[d, h, dims.observation], Activation::Tanh, rng)?;
        let reward = Mlp::new("rew", &[d, h, 1], Activation::Tanh, rng)?;
        Ok(Self::from_nets(dims, repr, dynamics, decoder, reward))
    }

    pub fn zeros(dims: WorldModelDims) -> Result<Self> {
        let d = dims.latent;
        let h = dims.hidden;
        Ok(Self::from_nets(
            dims,
            Mlp::zeros("repr", &[d + ACTION_SLOTS + dims.observation, h, d], Activation::Tanh)?,
            Mlp::zeros("dyn", &[d + ACTION_SLOTS, h, d], Activation::Tanh)?,
            Mlp::zeros("rec", &[d, h, dims.observation], Activation::Tanh)?,
            Mlp::zeros("rew", &[d, h, 1], Activation::Tanh)?,
        ))
    }

    fn from_nets(dims: WorldModelDims, repr: Mlp, dynamics: Mlp, decoder: Mlp, reward: Mlp) -> Self {
        let optimizers = [&repr, &dynamics, &decoder, &reward]
            .iter()
            .map(|n| Adam::new(n.params()))
            .collect();
        Self {
            repr,
            dynamics,
            decoder,
            reward,
            weights: LossWeights::default(),
            grad_clip: f64::INFINITY,
            dims,
            optimizers,
        }
    }

    pub fn dims(&self) -> WorldModelDims {
        self.dims
    }

    pub fn latent_dim(&self) -> usize {
        self.dims.latent
    }

    pub fn parameter_sets(&self) -> Vec<&ParameterSet> {
        vec![
            self.repr.params(),
            self.dynamics.params(),
            self.decoder.params(),
            self.reward.params(),
        ]
    }

    pub fn parameter_sets_mut(&mut self) -> Vec<&mut ParameterSet> {
        vec![
            self.repr.params_mut(),
            self.dynamics.params_mut(),
            self.decoder.params_mut(),
            self.reward.params_mut(),
        ]
    }

    fn check_latent(&self, op: &'static str, s: &LatentState) -> Result<()> {
        if s.dim() != self.dims.latent {
            return Err(dim_err(
                op,
                format!("latent of dimension {} for a {}-dim model", s.dim(), self.dims.latent),
            ));
        }
        Ok(())
    }

    fn repr_input(&self, prev: &[f64], prev_action: usize, obs: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.repr.input_dim());
        v.extend_from_slice(prev);
        v.extend_from_slice(&action_one_hot(prev_action));
        v.extend_from_slice(obs);
        v
    }

    /// `s_t = repr(s_{t-1}, a_{t-1}, x_t)`.
    pub fn encode(&self, prev: &LatentState, prev_action: usize, obs: &Observation) -> Result<LatentState> {
        self.encode_vec(prev, prev_action, &obs.to_vec())
    }

    pub fn encode_vec(&self, prev: &LatentState, prev_action: usize, obs: &[f64]) -> Result<LatentState> {
        self.check_latent("WorldModel::encode", prev)?;
        if obs.len() != self.dims.observation {
            return Err(dim_err(
                "WorldModel::encode",
                format!("observation of length {} (expected {})", obs.len(), self.dims.observation),
            ));
        }
        let input = self.repr_input(&prev.0, prev_action, obs);
        Ok(LatentState(self.repr.forward_vec(&input)?))
    }

    /// Encoding without history: zero previous latent and the null action.
    pub fn encode_cold(&self, obs: &Observation) -> Result<LatentState> {
        self.encode(&LatentState::zeros(self.dims.latent), NULL_ACTION, obs)
    }

    pub fn predict_next(&self, latent: &LatentState, action: usize) -> Result<LatentState> {
        self.check_latent("WorldModel::predict_next", latent)?;
        let mut input = latent.0.clone();
        input.extend_from_slice(&action_one_hot(action));
        Ok(LatentState(self.dynamics.forward_vec(&input)?))
    }

    pub fn decode(&self, latent: &LatentState) -> Result<Vec<f64>> {
        self.check_latent("WorldModel::decode", latent)?;
        self.decoder.forward_vec(&latent.0)
    }

    pub fn predict_reward(&self, latent: &LatentState) -> Result<f64> {
        self.check_latent("WorldModel::predict_reward", latent)?;
        Ok(self.reward.forward_vec(&latent.0)?[0])
    }

    fn forward_sequences(&self, batch: &[Vec<StoredTransition>]) -> Result<SequenceForward> {
        self.forward_sequences_with(batch, None)
    }

    fn forward_sequences_with(
        &self,
        batch: &[Vec<StoredTransition>],
        target_model: Option<&WorldModel>,
    ) -> Result<SequenceForward> {
        let b = batch.len();
        let steps = batch.first().map(|s| s.len()).unwrap_or(0);
        if b == 0 || steps == 0 || batch.iter().any(|s| s.len() != steps) {
            return Err(dim_err(
                "WorldModel::update",
                "batch must hold equal-length, non-empty sequences",
            ));
        }
        let d = self.dims.latent;
        let obs_at = |seq: &[StoredTransition], t: usize| -> Vec<f64> {
            if t < steps {
                seq[t].transition.observation.to_vec()
            } else {
                seq[steps - 1].transition.next_observation.to_vec()
            }
        };

        let mut states: Vec<Vec<Vec<f64>>> = Vec::with_capacity(steps + 1);
        let mut repr_caches = Vec::with_capacity(steps + 1);
        let mut observations: Vec<Vec<f64>> = Vec::with_capacity(b * (steps + 1));
        for t in 0..=steps {
            let mut rows = Vec::with_capacity(b);
            for (bi, seq) in batch.iter().enumerate() {
                let obs = obs_at(seq, t);
                let (prev, prev_action) = if t == 0 {
                    (vec![0.0; d], NULL_ACTION)
                } else {
                    (states[t - 1][bi].clone(), seq[t - 1].transition.action)
                };
                rows.push(self.repr_input(&prev, prev_action, &obs));
                observations.push(obs);
            }
            let cache = self.repr.forward_cached(&Tensor::from_rows(&rows)?)?;
            let out = cache.output();
            states.push((0..b).map(|bi| out.row(bi).to_vec()).collect());
            repr_caches.push(cache);
        }

        // reconstruction over all steps, rows ordered t-major
        let all_states: Vec<&[f64]> = states.iter().flatten().map(|v| v.as_slice()).collect();
        let recon_cache = self.decoder.forward_cached(&Tensor::from_rows(&all_states)?)?;
        let targets: Vec<f64> = observations.concat();
        let (recon, recon_grad) = mse(recon_cache.output().data(), &targets);

        // dynamics: s_{t-1}, a_{t-1} -> s_t (target detached)
        let mut dyn_rows = Vec::with_capacity(b * steps);
        let mut dyn_targets = Vec::with_capacity(b * steps * d);
        for t in 1..=steps {
            for (bi, seq) in batch.iter().enumerate() {
                let mut row = states[t - 1][bi].clone();
                row.extend_from_slice(&action_one_hot(seq[t - 1].transition.action));
                dyn_rows.push(row);
                dyn_targets.extend_from_slice(&states[t][bi]);
            }
        }
        if let Some(target) = target_model {
            let fwd = target.forward_sequences(batch)?;
            dyn_targets = fwd.states[1..].iter().flatten().flatten().copied().collect();
        }
        let dyn_cache = self.dynamics.forward_cached(&Tensor::from_rows(&dyn_rows)?)?;
        let (dynamics, dyn_grad) = mse(dyn_cache.output().data(), &dyn_targets);

        // reward: rew(s_{t+1}) ~ r_t
        let next_states: Vec<&[f64]> = states[1..].iter().flatten().map(|v| v.as_slice()).collect();
        let rew_cache = self.reward.forward_cached(&Tensor::from_rows(&next_states)?)?;
        let rewards: Vec<f64> = (0..steps)
            .flat_map(|t| batch.iter().map(move |seq| seq[t].transition.reward))
            .collect();
        let (reward, rew_grad) = mse(rew_cache.output().data(), &rewards);

        Ok(SequenceForward {
            batch: b,
            steps,
            repr_caches,
            states,
            losses: WorldModelLosses {
                recon,
                dynamics,
                reward,
            },
            recon_cache,
            recon_grad,
            dyn_cache,
            dyn_grad,
            rew_cache,
            rew_grad,
        })
    }

    /// Composite loss `w_r * recon + w_d * dyn + w_w * reward` on a batch.
    pub fn loss(&self, batch: &[Vec<StoredTransition>]) -> Result<WorldModelLosses> {
        Ok(self.forward_sequences(batch)?.losses)
    }

    /// Loss with dynamics targets produced by `target_model` instead of
    /// `self`. Equals [`WorldModel::loss`] when both hold the same weights;
    /// its derivative is the one [`WorldModel::loss_and_gradients`] returns.
    pub fn loss_against(
        &self,
        batch: &[Vec<StoredTransition>],
        target_model: &WorldModel,
    ) -> Result<WorldModelLosses> {
        Ok(self.forward_sequences_with(batch, Some(target_model))?.losses)
    }

    /// Loss components, gradients for `[repr, dyn, rec, rew]` and the latents.
    pub fn loss_and_gradients(
        &self,
        batch: &[Vec<StoredTransition>],
    ) -> Result<(WorldModelLosses, Vec<ParameterSet>, Vec<LatentState>)> {
        let fwd = self.forward_sequences(batch)?;
        let (b, steps, d) = (fwd.batch, fwd.steps, self.dims.latent);
        let w = self.weights;
        let mut g_repr = self.repr.params().zeros_like();
        let mut g_dyn = self.dynamics.params().zeros_like();
        let mut g_rec = self.decoder.params().zeros_like();
        let mut g_rew = self.reward.params().zeros_like();

        // dL/ds_t, flat [t][b][d]
        let mut grad_states = vec![0.0; (steps + 1) * b * d];

        let scaled = |g: &[f64], k: f64| g.iter().map(|v| v * k).collect::<Vec<f64>>();
        let up = Tensor::vector(scaled(&fwd.recon_grad, w.recon));
        let dx = self.decoder.backward_into(&fwd.recon_cache, &up, &mut g_rec)?;
        for (gs, v) in grad_states.iter_mut().zip(dx.data()) {
            *gs += v;
        }

        let up = Tensor::vector(scaled(&fwd.dyn_grad, w.dynamics));
        let dx = self.dynamics.backward_into(&fwd.dyn_cache, &up, &mut g_dyn)?;
        let width = d + ACTION_SLOTS;
        for row in 0..steps * b {
            // row (t-1)*b + bi feeds from s_{t-1}
            for k in 0..d {
                grad_states[row * d + k] += dx.data()[row * width + k];
            }
        }

        let up = Tensor::vector(scaled(&fwd.rew_grad, w.reward));
        let dx = self.reward.backward_into(&fwd.rew_cache, &up, &mut g_rew)?;
        for (k, v) in dx.data().iter().enumerate() {
            grad_states[b * d + k] += v;
        }

        // backprop through the recurrent representation chain
        let repr_width = self.repr.input_dim();
        for t in (0..=steps).rev() {
            let up = Tensor::new(vec![b, d], grad_states[t * b * d..(t + 1) * b * d].to_vec())?;
            let dx = self.repr.backward_into(&fwd.repr_caches[t], &up, &mut g_repr)?;
            if t > 0 {
                for bi in 0..b {
                    for k in 0..d {
                        grad_states[((t - 1) * b + bi) * d + k] += dx.data()[bi * repr_width + k];
                    }
                }
            }
        }

        let states = fwd
            .states
            .into_iter()
            .flatten()
            .map(LatentState)
            .collect();
        Ok((fwd.losses, vec![g_repr, g_dyn, g_rec, g_rew], states))
    }

    /// One optimizer step on the composite loss.
    pub fn update(&mut self, batch: &[Vec<StoredTransition>], lr: f64) -> Result<WorldModelUpdate> {
        let (losses, mut grads, states) = self.loss_and_gradients(batch)?;
        {
            let mut refs: Vec<&mut ParameterSet> = grads.iter_mut().collect();
            clip_global_norm(&mut refs, self.grad_clip);
        }
        let nets = [
            &mut self.repr,
            &mut self.dynamics,
            &mut self.decoder,
            &mut self.reward,
        ];
        for ((net, opt), g) in nets.into_iter().zip(self.optimizers.iter_mut()).zip(&grads) {
            opt.step(net.params_mut(), g, lr)?;
        }
        Ok(WorldModelUpdate { losses, states })
    }

    /// Replaces all four networks' parameters (layouts must match) and resets
    /// optimizer moments.
    pub fn set_parameter_sets(&mut self, sets: Vec<ParameterSet>) -> Result<()> {
        let mut it = sets.into_iter();
        for net in [
            &mut self.repr,
            &mut self.dynamics,
            &mut self.decoder,
            &mut self.reward,
        ] {
            let p = it
                .next()
                .ok_or_else(|| crate::Error::Config("world model needs 4 parameter sets".into()))?;
            net.set_params(p)?;
        }
        self.optimizers = self.parameter_sets().iter().map(|p| Adam::new(p)).collect();
        Ok(())
    }
}
