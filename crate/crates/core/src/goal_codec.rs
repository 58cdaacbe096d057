//! Goal autoencoder: latent states to factored one-hot codes and back.
//!
//! The encoder emits `F` groups of `C` logits. Codes are sampled per factor
//! and the decoder maps the concatenated one-hots to a goal vector in latent
//! space. Training backpropagates through the sampling step with the
//! straight-through estimator.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::{clip_global_norm, mse, softmax, Activation, Adam, Mlp, ParameterSet, Tensor};
use crate::world_model::LatentState;

/// Decoded goal `g = dec(z)`, living in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalVector(pub Vec<f64>);

impl GoalVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Factored categorical goal code, stored as the chosen class per factor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GoalCode {
    classes: usize,
    indices: Vec<usize>,
}

impl GoalCode {
    pub fn new(indices: Vec<usize>, classes: usize) -> Result<Self> {
        if indices.is_empty() || classes == 0 {
            return Err(Error::Config("goal code needs at least one factor and class".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= classes) {
            return Err(Error::Config(format!("class index {bad} out of range for {classes} classes")));
        }
        Ok(Self { classes, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn num_factors(&self) -> usize {
        self.indices.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    /// One one-hot vector per factor.
    pub fn factors(&self) -> Vec<Vec<f64>> {
        self.indices
            .iter()
            .map(|&i| {
                let mut v = vec![0.0; self.classes];
                v[i] = 1.0;
                v
            })
            .collect()
    }

    /// Concatenated one-hot vectors, length `F * C`.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.indices.len() * self.classes];
        for (f, &i) in self.indices.iter().enumerate() {
            v[f * self.classes + i] = 1.0;
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Sample,
    Greedy,
}

/// Samples one class per factor from `F x C` logits.
pub fn sample_factored<R: Rng + ?Sized>(
    logits: &[f64],
    classes: usize,
    rng: &mut R,
    mode: SampleMode,
) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|chunk| match mode {
            SampleMode::Greedy => argmax(chunk),
            SampleMode::Sample => sample_categorical(&softmax(chunk), rng),
        })
        .collect()
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Clone, Debug)]
pub struct GoalCodec {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub grad_clip: f64,
    factors: usize,
    classes: usize,
    optimizers: Vec<Adam>,
}

impl GoalCodec {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden: usize,
        factors: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let code_len = factors * classes;
        let encoder = Mlp::new("goal_enc", &[latent_dim, hidden, code_len], Activation::Tanh, rng)?;
        let decoder = Mlp::new("goal_dec", &[code_len, hidden, latent_dim], Activation::Tanh, rng)?;
        Ok(Self::from_nets(encoder, decoder, factors, classes))
    }

    pub fn from_nets(encoder: Mlp, decoder: Mlp, factors: usize, classes: usize) -> Self {
        let optimizers = vec![Adam::new(encoder.params()), Adam::new(decoder.params())];
        Self {
            encoder,
            decoder,
            grad_clip: f64::INFINITY,
            factors,
            classes,
            optimizers,
        }
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of distinct codes, `C^F`.
    pub fn code_space_size(&self) -> u128 {
        (self.classes as u128).pow(self.factors as u32)
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn parameter_sets(&self) -> Vec<&ParameterSet> {
        vec![self.encoder.params(), self.decoder.params()]
    }

    pub fn parameter_sets_mut(&mut self) -> Vec<&mut ParameterSet> {
        vec![self.encoder.params_mut(), self.decoder.params_mut()]
    }

    pub fn set_parameter_sets(&mut self, sets: Vec<ParameterSet>) -> Result<()> {
        let [enc, dec]: [ParameterSet; 2] = sets
            .try_into()
            .map_err(|_| Error::Config("goal codec needs 2 parameter sets".into()))?;
        self.encoder.set_params(enc)?;
        self.decoder.set_params(dec)?;
        self.optimizers = vec![Adam::new(self.encoder.params()), Adam::new(self.decoder.params())];
        Ok(())
    }

    pub fn encode_goal<R: Rng + ?Sized>(
        &self,
        s: &LatentState,
        rng: &mut R,
        mode: SampleMode,
    ) -> Result<GoalCode> {
        if s.dim() != self.latent_dim() {
            return Err(dim_err(
                "GoalCodec::encode_goal",
                format!("latent of dimension {} (expected {})", s.dim(), self.latent_dim()),
            ));
        }
        let logits = self.encoder.forward_vec(&s.0)?;
        GoalCode::new(sample_factored(&logits, self.classes, rng, mode), self.classes)
    }

    pub fn decode_goal(&self, z: &GoalCode) -> Result<GoalVector> {
        if z.num_factors() != self.factors || z.num_classes() != self.classes {
            return Err(dim_err(
                "GoalCodec::decode_goal",
                format!(
                    "code of {}x{} for a {}x{} codec",
                    z.num_factors(),
                    z.num_classes(),
                    self.factors,
                    self.classes
                ),
            ));
        }
        Ok(GoalVector(self.decoder.forward_vec(&z.one_hot())?))
    }

    fn encoder_probs(&self, batch: &Tensor) -> Result<(crate::nn::ForwardCache, Vec<f64>)> {
        let cache = self.encoder.forward_cached(batch)?;
        let probs = cache
            .output()
            .data()
            .chunks(self.classes)
            .flat_map(softmax)
            .collect();
        Ok((cache, probs))
    }

    /// Reconstruction loss and straight-through gradients `[enc, dec]` for
    /// fixed per-row code samples.
    pub fn loss_and_gradients(
        &self,
        batch: &[LatentState],
        samples: &[GoalCode],
    ) -> Result<(f64, Vec<ParameterSet>)> {
        let rows: Vec<&[f64]> = batch.iter().map(|s| s.as_slice()).collect();
        let input = Tensor::from_rows(&rows)?;
        let (enc_cache, probs) = self.encoder_probs(&input)?;
        let codes: Vec<Vec<f64>> = samples.iter().map(GoalCode::one_hot).collect();
        let dec_cache = self.decoder.forward_cached(&Tensor::from_rows(&codes)?)?;
        let (loss, grad) = mse(dec_cache.output().data(), input.data());

        let mut g_enc = self.encoder.params().zeros_like();
        let mut g_dec = self.decoder.params().zeros_like();
        let d_code = self
            .decoder
            .backward_into(&dec_cache, &Tensor::vector(grad), &mut g_dec)?;
        // straight-through: d code / d probs = identity, then softmax Jacobian
        let mut d_logits = vec![0.0; d_code.len()];
        for (k, (g, p)) in d_code
            .data()
            .chunks(self.classes)
            .zip(probs.chunks(self.classes))
            .enumerate()
        {
            let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
            for c in 0..self.classes {
                d_logits[k * self.classes + c] = p[c] * (g[c] - dot);
            }
        }
        self.encoder
            .backward_into(&enc_cache, &Tensor::vector(d_logits), &mut g_enc)?;
        Ok((loss, vec![g_enc, g_dec]))
    }

    /// Surrogate whose exact gradient at the current parameters equals the
    /// straight-through gradient: the decoder sees `onehot + p - p_frozen`.
    pub fn straight_through_surrogate(
        &self,
        batch: &[LatentState],
        samples: &[GoalCode],
        frozen_probs: &[f64],
    ) -> Result<f64> {
        let rows: Vec<&[f64]> = batch.iter().map(|s| s.as_slice()).collect();
        let input = Tensor::from_rows(&rows)?;
        let (_, probs) = self.encoder_probs(&input)?;
        let codes: Vec<f64> = samples
            .iter()
            .flat_map(GoalCode::one_hot)
            .zip(probs.iter().zip(frozen_probs))
            .map(|(h, (p, p0))| h + p - p0)
            .collect();
        let out = self
            .decoder
            .forward(&Tensor::new(vec![batch.len(), self.factors * self.classes], codes)?)?;
        Ok(mse(out.data(), input.data()).0)
    }

    /// Current encoder probabilities for a batch, flattened `[row][F*C]`.
    pub fn probabilities(&self, batch: &[LatentState]) -> Result<Vec<f64>> {
        let rows: Vec<&[f64]> = batch.iter().map(|s| s.as_slice()).collect();
        Ok(self.encoder_probs(&Tensor::from_rows(&rows)?)?.1)
    }

    /// One step on reconstruction MSE with freshly sampled codes.
    pub fn update_codec<R: Rng + ?Sized>(
        &mut self,
        batch: &[LatentState],
        lr: f64,
        rng: &mut R,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let samples = batch
            .iter()
            .map(|s| self.encode_goal(s, rng, SampleMode::Sample))
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grads) = self.loss_and_gradients(batch, &samples)?;
        {
            let mut refs: Vec<&mut ParameterSet> = grads.iter_mut().collect();
            clip_global_norm(&mut refs, self.grad_clip);
        }
        self.optimizers[0].step(self.encoder.params_mut(), &grads[0], lr)?;
        self.optimizers[1].step(self.decoder.params_mut(), &grads[1], lr)?;
        Ok(loss)
    }
}
