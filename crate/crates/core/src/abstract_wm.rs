//! Temporally abstract world model: from a state and a goal, predicts the
//! latent reached K steps later and the reward collected on the way.
//!
//! Training pairs come from the extended buffer. Both endpoints are encoded
//! by the primitive model without gradient flowing back into it.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::goal_codec::GoalVector;
use crate::nn::{clip_global_norm, mse, Activation, Adam, Mlp, ParameterSet, Tensor};
use crate::replay::ExtendedTransition;
use crate::world_model::{LatentState, WorldModel};

/// One extended transition in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct AbstractSample {
    pub start: LatentState,
    pub goal: GoalVector,
    pub target: LatentState,
    pub reward: f64,
}

/// Encodes buffer entries with `world_model` (cold encoding at both ends).
pub fn encode_extended(
    entries: &[&ExtendedTransition],
    world_model: &WorldModel,
) -> Result<Vec<AbstractSample>> {
    entries
        .iter()
        .map(|e| {
            Ok(AbstractSample {
                start: world_model.encode_cold(&e.start_observation)?,
                goal: e.goal.clone(),
                target: world_model.encode_cold(&e.end_observation)?,
                reward: e.cumulative_reward,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AbstractLosses {
    pub latent_mse: f64,
    pub reward_mse: f64,
}

impl AbstractLosses {
    pub fn total(&self) -> f64 {
        self.latent_mse + self.reward_mse
    }
}

#[derive(Clone, Debug)]
pub struct AbstractWorldModel {
    pub transition: Mlp,
    pub reward: Mlp,
    pub grad_clip: f64,
    latent_dim: usize,
    optimizers: Vec<Adam>,
}

impl AbstractWorldModel {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let d = latent_dim;
        let transition = Mlp::new("trans", &[2 * d, hidden, d], Activation::Tanh, rng)?;
        let reward = Mlp::new("abs_rew", &[2 * d, hidden, 1], Activation::Tanh, rng)?;
        Ok(Self::from_nets(latent_dim, transition, reward))
    }

    pub fn zeros(latent_dim: usize, hidden: usize) -> Result<Self> {
        let d = latent_dim;
        Ok(Self::from_nets(
            latent_dim,
            Mlp::zeros("trans", &[2 * d, hidden, d], Activation::Tanh)?,
            Mlp::zeros("abs_rew", &[2 * d, hidden, 1], Activation::Tanh)?,
        ))
    }

    pub fn from_nets(latent_dim: usize, transition: Mlp, reward: Mlp) -> Self {
        let optimizers = vec![Adam::new(transition.params()), Adam::new(reward.params())];
        Self {
            transition,
            reward,
            grad_clip: f64::INFINITY,
            latent_dim,
            optimizers,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn parameter_sets(&self) -> Vec<&ParameterSet> {
        vec![self.transition.params(), self.reward.params()]
    }

    pub fn parameter_sets_mut(&mut self) -> Vec<&mut ParameterSet> {
        vec![self.transition.params_mut(), self.reward.params_mut()]
    }

    pub fn set_parameter_sets(&mut self, sets: Vec<ParameterSet>) -> Result<()> {
        let [t, r]: [ParameterSet; 2] = sets
            .try_into()
            .map_err(|_| Error::Config("abstract model needs 2 parameter sets".into()))?;
        self.transition.set_params(t)?;
        self.reward.set_params(r)?;
        self.optimizers = vec![Adam::new(self.transition.params()), Adam::new(self.reward.params())];
        Ok(())
    }

    fn input(&self, s: &LatentState, g: &GoalVector) -> Result<Vec<f64>> {
        if s.dim() != self.latent_dim || g.dim() != self.latent_dim {
            return Err(dim_err(
                "AbstractWorldModel::predict",
                format!(
                    "latent {} and goal {} for a {}-dim model",
                    s.dim(),
                    g.dim(),
                    self.latent_dim
                ),
            ));
        }
        let mut v = Vec::with_capacity(2 * self.latent_dim);
        v.extend_from_slice(&s.0);
        v.extend_from_slice(&g.0);
        Ok(v)
    }

    /// Predicted `(s_{t+K}, R)` for committing to `g` from `s`.
    pub fn predict_abstract(&self, s: &LatentState, g: &GoalVector) -> Result<(LatentState, f64)> {
        let x = self.input(s, g)?;
        let next = self.transition.forward_vec(&x)?;
        let r = self.reward.forward_vec(&x)?[0];
        Ok((LatentState(next), r))
    }

    fn batch_input(&self, samples: &[AbstractSample]) -> Result<Tensor> {
        let rows = samples
            .iter()
            .map(|e| {
                if e.target.dim() != self.latent_dim {
                    return Err(dim_err(
                        "AbstractWorldModel::loss",
                        format!("target latent of dimension {}", e.target.dim()),
                    ));
                }
                self.input(&e.start, &e.goal)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    fn targets(samples: &[AbstractSample]) -> (Vec<f64>, Vec<f64>) {
        let latents = samples.iter().flat_map(|e| e.target.0.iter().copied()).collect();
        let rewards = samples.iter().map(|e| e.reward).collect();
        (latents, rewards)
    }

    pub fn loss(&self, samples: &[AbstractSample]) -> Result<AbstractLosses> {
        if samples.is_empty() {
            return Ok(AbstractLosses::default());
        }
        let x = self.batch_input(samples)?;
        let (latents, rewards) = Self::targets(samples);
        Ok(AbstractLosses {
            latent_mse: mse(self.transition.forward(&x)?.data(), &latents).0,
            reward_mse: mse(self.reward.forward(&x)?.data(), &rewards).0,
        })
    }

    /// Losses and gradients `[trans, rew]`; targets are constants.
    pub fn loss_and_gradients(
        &self,
        samples: &[AbstractSample],
    ) -> Result<(AbstractLosses, Vec<ParameterSet>)> {
        let mut g_t = self.transition.params().zeros_like();
        let mut g_r = self.reward.params().zeros_like();
        if samples.is_empty() {
            return Ok((AbstractLosses::default(), vec![g_t, g_r]));
        }
        let x = self.batch_input(samples)?;
        let (latents, rewards) = Self::targets(samples);
        let t_cache = self.transition.forward_cached(&x)?;
        let (latent_mse, dl) = mse(t_cache.output().data(), &latents);
        self.transition.backward_into(&t_cache, &Tensor::vector(dl), &mut g_t)?;
        let r_cache = self.reward.forward_cached(&x)?;
        let (reward_mse, dr) = mse(r_cache.output().data(), &rewards);
        self.reward.backward_into(&r_cache, &Tensor::vector(dr), &mut g_r)?;
        Ok((
            AbstractLosses {
                latent_mse,
                reward_mse,
            },
            vec![g_t, g_r],
        ))
    }

    /// One optimizer step on already-encoded samples. Returns the losses
    /// before the step.
    pub fn update_samples(&mut self, samples: &[AbstractSample], lr: f64) -> Result<AbstractLosses> {
        let (losses, mut grads) = self.loss_and_gradients(samples)?;
        {
            let mut refs: Vec<&mut ParameterSet> = grads.iter_mut().collect();
            clip_global_norm(&mut refs, self.grad_clip);
        }
        self.optimizers[0].step(self.transition.params_mut(), &grads[0], lr)?;
        self.optimizers[1].step(self.reward.params_mut(), &grads[1], lr)?;
        Ok(losses)
    }

    /// Encodes `batch` with the (untouched) primitive model and takes one step.
    pub fn update_abstract(
        &mut self,
        batch: &[&ExtendedTransition],
        world_model: &WorldModel,
        lr: f64,
    ) -> Result<AbstractLosses> {
        let samples = encode_extended(batch, world_model)?;
        self.update_samples(&samples, lr)
    }
}
