//! The training loop: acting with planner-chosen goals, filling both replay
//! buffers, and running the abstract and primitive update schedules. Also
//! checkpoint I/O for the agent, greedy evaluation, and the transfer runner.
//!
//! Per environment step `t` (global) with within-episode step `e`:
//!
//! 1. encode the observation (cold at `e == 0`)
//! 2. if `e % K == 0`, choose a goal (tree search, or the greedy manager goal
//!    for the flat baseline) and open a segment
//! 3. act with the worker, store the primitive transition
//! 4. if `(e + 1) % K == 0`, push the finished segment to the extended buffer
//! 5. if `t % C == 0`, attempt an abstract model update
//! 6. if `t % P == 0`, attempt world model, codec and policy updates
//!
//! A segment cut short by an episode end is dropped.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::abstract_wm::AbstractWorldModel;
use crate::checkpoint::{check_component_name, Checkpoint, COMPONENT_NAMES, VERSION};
use crate::config::AgentConfig;
use crate::env::{MazeEnv, MazeLayout, Observation};
use crate::error::{Error, Result};
use crate::goal_codec::{GoalCodec, GoalVector, SampleMode};
use crate::hierarchy::{imagine, update_hierarchy, Manager, PolicyGradientConfig, Worker};
use crate::metrics::MetricsRow;
use crate::nn::ParameterSet;
use crate::planner::{self, PlanningModels};
use crate::replay::{ExtendedTransition, ReplayStore, StoredTransition};
use crate::world_model::{LatentState, WorldModel, WorldModelDims, NULL_ACTION};

/// Named random streams, all derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Env,
    Policy,
    Planner,
    Buffers,
    Updates,
    /// Initialization of one component (index into [`COMPONENT_NAMES`]).
    Init(usize),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Env => 1,
            Stream::Policy => 2,
            Stream::Planner => 3,
            Stream::Buffers => 4,
            Stream::Updates => 5,
            Stream::Init(i) => 16 + i as u64,
        }
    }
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream.id());
    r
}

fn component_index(name: &str) -> Result<usize> {
    check_component_name(name)?;
    Ok(COMPONENT_NAMES.iter().position(|n| *n == name).expect("checked"))
}

/// Every learned component of the agent.
#[derive(Clone, Debug)]
pub struct Agent {
    pub world_model: WorldModel,
    pub codec: GoalCodec,
    pub manager: Manager,
    pub worker: Worker,
    pub abstract_model: AbstractWorldModel,
}

impl Agent {
    /// Fresh networks; each component draws from its own init stream, so one
    /// component's initialization never depends on another's.
    pub fn new(cfg: &AgentConfig) -> Result<Self> {
        let d = cfg.latent_dim;
        let h = cfg.hidden_dim;
        let init = |name: &str| substream(cfg.seed, Stream::Init(component_index(name).expect("known name")));
        let mut world_model = WorldModel::new(WorldModelDims::new(d, h), &mut init("world_model"))?;
        world_model.grad_clip = cfg.grad_clip;
        let mut codec = GoalCodec::new(d, h, cfg.code_factors, cfg.code_classes, &mut init("goal_codec"))?;
        codec.grad_clip = cfg.grad_clip;
        let manager = Manager::new(d, h, cfg.code_factors, cfg.code_classes, &mut init("manager"))?;
        let worker = Worker::new(d, h, &mut init("worker"))?;
        let mut abstract_model = AbstractWorldModel::new(d, h, &mut init("abstract_wm"))?;
        abstract_model.grad_clip = cfg.grad_clip;
        Ok(Self {
            world_model,
            codec,
            manager,
            worker,
            abstract_model,
        })
    }

    pub fn component(&self, name: &str) -> Result<Vec<ParameterSet>> {
        let sets: Vec<&ParameterSet> = match component_index(name)? {
            0 => self.world_model.parameter_sets(),
            1 => self.codec.parameter_sets(),
            2 => vec![self.manager.net.params()],
            3 => vec![self.worker.net.params()],
            _ => self.abstract_model.parameter_sets(),
        };
        Ok(sets.into_iter().cloned().collect())
    }

    /// Replaces one component's parameters (optimizer state restarts).
    pub fn set_component(&mut self, name: &str, mut sets: Vec<ParameterSet>) -> Result<()> {
        for s in &mut sets {
            s.set_step_count(0);
        }
        let load_err = |detail: String| Error::Load {
            component: name.to_string(),
            detail,
        };
        let current = self.component(name)?;
        if current.len() != sets.len() {
            return Err(load_err(format!(
                "expected {} parameter sets, found {}",
                current.len(),
                sets.len()
            )));
        }
        for (have, got) in current.iter().zip(&sets) {
            if !have.same_layout(got) {
                return Err(load_err(format!(
                    "shape mismatch in '{}' (checkpoint layout differs from the configured network)",
                    have.name()
                )));
            }
        }
        let result = match component_index(name)? {
            0 => self.world_model.set_parameter_sets(sets),
            1 => self.codec.set_parameter_sets(sets),
            2 => self.manager.set_params(sets.into_iter().next().expect("one set")),
            3 => self.worker.set_params(sets.into_iter().next().expect("one set")),
            _ => self.abstract_model.set_parameter_sets(sets),
        };
        result.map_err(|e| load_err(e.to_string()))
    }

    pub fn to_checkpoint(&self, cfg: &AgentConfig, env_steps: u64) -> Result<Checkpoint> {
        let components = COMPONENT_NAMES
            .iter()
            .map(|n| Ok((n.to_string(), self.component(n)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            version: VERSION,
            env_steps,
            config: cfg.to_text(),
            components,
        })
    }

    /// Loads exactly `names` from `ckpt`; every other component is untouched.
    pub fn load_components(&mut self, ckpt: &Checkpoint, names: &[&str]) -> Result<()> {
        for name in names {
            check_component_name(name)?;
        }
        for (name, _) in &ckpt.components {
            check_component_name(name)?;
        }
        for name in names {
            let sets = ckpt.component(name).ok_or_else(|| Error::Load {
                component: name.to_string(),
                detail: "not present in checkpoint".into(),
            })?;
            self.set_component(name, sets.to_vec())?;
        }
        Ok(())
    }
}

/// Builds the run's maze: from `maze_file`, else generated from `maze_seed`
/// or a draw from the env stream.
pub fn build_layout(cfg: &AgentConfig) -> Result<MazeLayout> {
    if let Some(path) = &cfg.maze_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read maze file {path}: {e}")))?;
        return MazeLayout::load(&text);
    }
    let seed = match cfg.maze_seed {
        Some(s) => s,
        None => substream(cfg.seed, Stream::Env).gen(),
    };
    Ok(MazeLayout::generate(cfg.size_class, seed))
}

/// Schedule events, recorded when tracing is on.
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Plan { t: u64, episode: u64, episode_step: u64, goal_index: u64 },
    Act { t: u64, episode: u64, episode_step: u64, goal_index: u64 },
    StorePrimitive { t: u64 },
    PushExtended { t: u64, episode: u64, start_step: u64, goal_index: u64, reward: f64 },
    DropSegment { t: u64, episode: u64, start_step: u64 },
    AbstractUpdate { t: u64, performed: bool },
    PrimitiveUpdate { t: u64, performed: bool },
    EpisodeEnd { t: u64, episode: u64, success: bool },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub env_steps: u64,
    pub episodes: u64,
    pub successes: u64,
    /// 1-based index of the first successful episode.
    pub first_success_episode: Option<u64>,
    /// Global step count at the end of that episode.
    pub first_success_step: Option<u64>,
    pub planner_calls: u64,
    pub abstract_update_attempts: u64,
    pub abstract_updates: u64,
    pub primitive_update_attempts: u64,
    pub primitive_updates: u64,
    pub extended_pushes: u64,
    pub segments_dropped: u64,
    /// Success fraction over the last (up to) 10 completed episodes.
    pub final_success_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub rows: Vec<MetricsRow>,
}

#[derive(Clone, Copy, Debug, Default)]
struct LatestLosses {
    wm_recon: f64,
    wm_dyn: f64,
    wm_rew: f64,
    codec: f64,
    abstract_latent: f64,
    abstract_rew: f64,
    manager_pg: f64,
    worker_pg: f64,
}

struct Segment {
    start_observation: Observation,
    start_step: u64,
    reward: f64,
}

/// Single-threaded trainer owning the agent, environment and buffers.
pub struct Trainer {
    pub config: AgentConfig,
    pub agent: Agent,
    pub replay: ReplayStore,
    env: MazeEnv,
    rng_policy: ChaCha8Rng,
    rng_planner: ChaCha8Rng,
    rng_buffers: ChaCha8Rng,
    rng_updates: ChaCha8Rng,
    t: u64,
    episode: u64,
    episode_step: u64,
    episode_return: f64,
    needs_reset: bool,
    latent: LatentState,
    prev_action: usize,
    goal: Option<GoalVector>,
    goal_index: u64,
    segment: Option<Segment>,
    latest: LatestLosses,
    window_returns: f64,
    window_episodes: u64,
    window_success: bool,
    window_plan_us: u64,
    recent_success: Vec<bool>,
    summary: RunSummary,
    rows: Vec<MetricsRow>,
    trace: Option<Vec<Event>>,
}

impl Trainer {
    pub fn new(config: AgentConfig, agent: Agent) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config)?;
        Self::with_layout(config, agent, layout)
    }

    pub fn with_layout(config: AgentConfig, agent: Agent, layout: MazeLayout) -> Result<Self> {
        config.validate()?;
        if agent.world_model.latent_dim() != config.latent_dim {
            return Err(Error::Config("agent latent size differs from the config".into()));
        }
        let env = MazeEnv::new(layout, config.episode_limit());
        let seed = config.seed;
        Ok(Self {
            replay: ReplayStore::new(config.primitive_capacity, config.extended_capacity, config.goal_interval),
            env,
            rng_policy: substream(seed, Stream::Policy),
            rng_planner: substream(seed, Stream::Planner),
            rng_buffers: substream(seed, Stream::Buffers),
            rng_updates: substream(seed, Stream::Updates),
            t: 0,
            episode: 0,
            episode_step: 0,
            episode_return: 0.0,
            needs_reset: true,
            latent: LatentState::zeros(config.latent_dim),
            prev_action: NULL_ACTION,
            goal: None,
            goal_index: 0,
            segment: None,
            latest: LatestLosses::default(),
            window_returns: 0.0,
            window_episodes: 0,
            window_success: false,
            window_plan_us: 0,
            recent_success: Vec::new(),
            summary: RunSummary::default(),
            rows: Vec::new(),
            trace: None,
            config,
            agent,
        })
    }

    pub fn from_config(config: AgentConfig) -> Result<Self> {
        let agent = Agent::new(&config)?;
        Self::new(config, agent)
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[Event] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn layout(&self) -> &MazeLayout {
        self.env.layout()
    }

    pub fn env_steps(&self) -> u64 {
        self.t
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn summary(&self) -> &RunSummary {
        &self.summary
    }

    fn record(&mut self, e: Event) {
        if let Some(tr) = &mut self.trace {
            tr.push(e);
        }
    }

    fn choose_goal(&mut self) -> Result<GoalVector> {
        let started = self.config.record_plan_time.then(Instant::now);
        let goal = if self.config.planner {
            let models = PlanningModels {
                manager: &self.agent.manager,
                codec: &self.agent.codec,
                abstract_model: &self.agent.abstract_model,
                branching: self.config.branching,
                depth: self.config.depth,
                mode: SampleMode::Sample,
            };
            planner::plan(&self.latent, &models, self.config.option_discount(), &mut self.rng_planner)?.1
        } else {
            let z = self
                .agent
                .manager
                .manager_sample(&self.latent, &mut self.rng_policy, SampleMode::Greedy)?;
            self.agent.codec.decode_goal(&z)?
        };
        if let Some(s) = started {
            self.window_plan_us += s.elapsed().as_micros() as u64;
        }
        Ok(goal)
    }

    /// One environment step with its scheduled updates.
    pub fn step(&mut self) -> Result<()> {
        let k = self.config.goal_interval as u64;
        let t = self.t;
        let obs = if self.needs_reset {
            self.needs_reset = false;
            let obs = self.env.reset();
            self.latent = self.agent.world_model.encode_cold(&obs)?;
            obs
        } else {
            let obs = self.env.observation().clone();
            self.latent = self.agent.world_model.encode(&self.latent, self.prev_action, &obs)?;
            obs
        };

        if self.episode_step.is_multiple_of(k) {
            let goal = self.choose_goal()?;
            self.goal = Some(goal);
            self.goal_index += 1;
            self.summary.planner_calls += 1;
            self.segment = Some(Segment {
                start_observation: obs,
                start_step: self.episode_step,
                reward: 0.0,
            });
            self.record(Event::Plan {
                t,
                episode: self.episode,
                episode_step: self.episode_step,
                goal_index: self.goal_index,
            });
        }
        let goal = self.goal.clone().expect("goal chosen at segment start");
        let action = self
            .agent
            .worker
            .worker_act(&self.latent, &goal, &mut self.rng_policy, SampleMode::Sample)?;
        self.record(Event::Act {
            t,
            episode: self.episode,
            episode_step: self.episode_step,
            goal_index: self.goal_index,
        });
        let transition = self.env.step(action)?;
        let reward = transition.reward;
        let ended = transition.terminal;
        let success = reward > 0.0;
        let next_observation = transition.next_observation.clone();
        self.replay.push_primitive(StoredTransition {
            episode: self.episode,
            step: self.episode_step,
            transition,
        })?;
        self.record(Event::StorePrimitive { t });
        self.episode_return += reward;
        self.prev_action = action;

        let segment_full = (self.episode_step + 1).is_multiple_of(k);
        if let Some(seg) = &mut self.segment {
            seg.reward += reward;
        }
        if segment_full {
            let seg = self.segment.take().expect("open segment");
            let start_step = seg.start_step;
            self.replay.push_extended(ExtendedTransition {
                start_observation: seg.start_observation,
                end_observation: next_observation,
                goal,
                cumulative_reward: seg.reward,
                episode: self.episode,
                start_step,
            })?;
            self.summary.extended_pushes += 1;
            self.record(Event::PushExtended {
                t,
                episode: self.episode,
                start_step,
                goal_index: self.goal_index,
                reward: seg.reward,
            });
        } else if ended {
            let seg = self.segment.take().expect("open segment");
            self.summary.segments_dropped += 1;
            self.record(Event::DropSegment {
                t,
                episode: self.episode,
                start_step: seg.start_step,
            });
        }

        if t.is_multiple_of(self.config.abstract_update_period) {
            let performed = self.abstract_update()?;
            self.record(Event::AbstractUpdate { t, performed });
        }
        if t.is_multiple_of(self.config.primitive_update_period) {
            let performed = self.primitive_update()?;
            self.record(Event::PrimitiveUpdate { t, performed });
        }

        self.t += 1;
        self.summary.env_steps = self.t;
        if ended {
            self.finish_episode(success);
        } else {
            self.episode_step += 1;
        }
        Ok(())
    }

    fn finish_episode(&mut self, success: bool) {
        let t = self.t;
        self.record(Event::EpisodeEnd {
            t: t - 1,
            episode: self.episode,
            success,
        });
        self.episode += 1;
        self.summary.episodes = self.episode;
        if success {
            self.summary.successes += 1;
            if self.summary.first_success_episode.is_none() {
                self.summary.first_success_episode = Some(self.episode);
                self.summary.first_success_step = Some(t);
            }
        }
        self.recent_success.push(success);
        let tail = &self.recent_success[self.recent_success.len().saturating_sub(10)..];
        self.summary.final_success_rate = tail.iter().filter(|&&s| s).count() as f64 / tail.len() as f64;

        self.window_returns += self.episode_return;
        self.window_episodes += 1;
        self.window_success |= success;
        if self.window_episodes == self.config.eval_every as u64 {
            let l = self.latest;
            self.rows.push(MetricsRow {
                step: t,
                episode: self.episode,
                episode_return: self.window_returns / self.window_episodes as f64,
                success: self.window_success as u8,
                wm_recon_loss: l.wm_recon,
                wm_dyn_loss: l.wm_dyn,
                wm_rew_loss: l.wm_rew,
                codec_loss: l.codec,
                abstract_latent_mse: l.abstract_latent,
                abstract_rew_mse: l.abstract_rew,
                manager_pg: l.manager_pg,
                worker_pg: l.worker_pg,
                plan_time_us: self.window_plan_us,
            });
            self.window_returns = 0.0;
            self.window_episodes = 0;
            self.window_success = false;
            self.window_plan_us = 0;
        }
        self.episode_return = 0.0;
        self.episode_step = 0;
        self.needs_reset = true;
        self.prev_action = NULL_ACTION;
        self.segment = None;
    }

    fn abstract_update(&mut self) -> Result<bool> {
        self.summary.abstract_update_attempts += 1;
        let batch = match self
            .replay
            .sample_extended_batch(&mut self.rng_buffers, self.config.extended_batch)
        {
            Ok(b) => b,
            Err(Error::NotReady(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        let refs: Vec<&ExtendedTransition> = batch.iter().collect();
        let losses = self.agent.abstract_model.update_abstract(
            &refs,
            &self.agent.world_model,
            self.config.lr_abstract,
        )?;
        self.latest.abstract_latent = losses.latent_mse;
        self.latest.abstract_rew = losses.reward_mse;
        self.summary.abstract_updates += 1;
        Ok(true)
    }

    fn primitive_update(&mut self) -> Result<bool> {
        self.summary.primitive_update_attempts += 1;
        let batch = match self.replay.sample_sequence_batch(
            &mut self.rng_buffers,
            self.config.sequence_batch,
            self.config.sequence_length,
        ) {
            Ok(b) => b,
            Err(Error::NotReady(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        let cfg = &self.config;
        let upd = self.agent.world_model.update(&batch, cfg.lr_world_model)?;
        self.latest.wm_recon = upd.losses.recon;
        self.latest.wm_dyn = upd.losses.dynamics;
        self.latest.wm_rew = upd.losses.reward;
        self.latest.codec = self
            .agent
            .codec
            .update_codec(&upd.states, cfg.lr_codec, &mut self.rng_updates)?;

        let n = cfg.imagination_batch.min(upd.states.len());
        let starts: Vec<LatentState> = upd
            .states
            .choose_multiple(&mut self.rng_updates, n)
            .cloned()
            .collect();
        let trajs = imagine(
            &starts,
            cfg.imagination_horizon,
            cfg.goal_interval,
            &self.agent.world_model,
            &self.agent.codec,
            &self.agent.manager,
            &self.agent.worker,
            &mut self.rng_updates,
            SampleMode::Sample,
        )?;
        let pg = PolicyGradientConfig {
            gamma: cfg.gamma,
            goal_interval: cfg.goal_interval,
            entropy_weight: cfg.entropy_weight,
            grad_clip: cfg.grad_clip,
        };
        let losses = update_hierarchy(
            &mut self.agent.manager,
            &mut self.agent.worker,
            &trajs,
            cfg.lr_manager,
            cfg.lr_worker,
            &pg,
        )?;
        self.latest.manager_pg = losses.manager_pg;
        self.latest.worker_pg = losses.worker_pg;
        self.summary.primitive_updates += 1;
        Ok(true)
    }

    /// Runs until the step budget (or the first success, if configured).
    pub fn run(&mut self) -> Result<RunOutput> {
        while self.t < self.config.total_env_steps {
            self.step()?;
            if self.config.stop_at_first_success && self.summary.first_success_episode.is_some() {
                break;
            }
        }
        Ok(RunOutput {
            summary: self.summary.clone(),
            rows: self.rows.clone(),
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.agent.to_checkpoint(&self.config, self.t)
    }
}

/// Fresh agent, fresh buffers, full budget.
pub fn run_training(config: &AgentConfig) -> Result<RunOutput> {
    Trainer::from_config(config.clone())?.run()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransferArm {
    Full,
    NoAbstract,
    Scratch,
}

impl TransferArm {
    pub fn name(self) -> &'static str {
        match self {
            TransferArm::Full => "full",
            TransferArm::NoAbstract => "no_abstract",
            TransferArm::Scratch => "scratch",
        }
    }

    pub fn components(self) -> &'static [&'static str] {
        match self {
            TransferArm::Full => &["world_model", "goal_codec", "manager", "worker", "abstract_wm"],
            TransferArm::NoAbstract => &["world_model", "goal_codec", "manager", "worker"],
            TransferArm::Scratch => &[],
        }
    }
}

impl std::str::FromStr for TransferArm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(TransferArm::Full),
            "no_abstract" => Ok(TransferArm::NoAbstract),
            "scratch" => Ok(TransferArm::Scratch),
            other => Err(Error::Usage(format!(
                "unknown transfer arm '{other}' (expected full, no_abstract or scratch)"
            ))),
        }
    }
}

/// Fine-tune agent for one arm: fresh from the fine-tune config, with the
/// arm's components loaded from the pretraining checkpoint.
pub fn transfer_agent(finetune: &AgentConfig, pretrained: &Checkpoint, arm: TransferArm) -> Result<Agent> {
    let mut agent = Agent::new(finetune)?;
    if arm != TransferArm::Scratch {
        agent.load_components(pretrained, arm.components())?;
    }
    Ok(agent)
}

/// Pretrains once, then fine-tunes each arm with fresh buffers.
pub fn run_transfer(
    pretrain: &AgentConfig,
    finetune: &AgentConfig,
    arms: &[TransferArm],
) -> Result<Vec<(TransferArm, RunOutput)>> {
    let needs_pretraining = arms.iter().any(|a| *a != TransferArm::Scratch);
    let ckpt = if needs_pretraining {
        let mut trainer = Trainer::from_config(pretrain.clone())?;
        trainer.run()?;
        Some(trainer.checkpoint()?)
    } else {
        None
    };
    arms.iter()
        .map(|&arm| {
            let agent = match &ckpt {
                Some(c) => transfer_agent(finetune, c, arm)?,
                None => Agent::new(finetune)?,
            };
            let out = Trainer::new(finetune.clone(), agent)?.run()?;
            Ok((arm, out))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_episode_length: f64,
}

/// Greedy rollouts (manager or planner, and worker) without learning.
pub fn evaluate(agent: &Agent, cfg: &AgentConfig, layout: MazeLayout, episodes: usize) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".into()));
    }
    let mut env = MazeEnv::new(layout, cfg.episode_limit());
    let mut rng = substream(cfg.seed, Stream::Planner);
    let k = cfg.goal_interval;
    let mut successes = 0usize;
    let mut total_len = 0usize;
    for _ in 0..episodes {
        let mut obs = env.reset();
        let mut latent = agent.world_model.encode_cold(&obs)?;
        let mut goal = None;
        let mut step = 0usize;
        loop {
            if step.is_multiple_of(k) {
                goal = Some(if cfg.planner {
                    let models = PlanningModels {
                        manager: &agent.manager,
                        codec: &agent.codec,
                        abstract_model: &agent.abstract_model,
                        branching: cfg.branching,
                        depth: cfg.depth,
                        mode: SampleMode::Greedy,
                    };
                    planner::plan(&latent, &models, cfg.option_discount(), &mut rng)?.1
                } else {
                    let z = agent.manager.manager_sample(&latent, &mut rng, SampleMode::Greedy)?;
                    agent.codec.decode_goal(&z)?
                });
            }
            let g = goal.as_ref().expect("goal set at step 0");
            let a = agent.worker.worker_act(&latent, g, &mut rng, SampleMode::Greedy)?;
            let tr = env.step(a)?;
            step += 1;
            if tr.terminal {
                successes += (tr.reward > 0.0) as usize;
                break;
            }
            obs = tr.next_observation;
            latent = agent.world_model.encode(&latent, a, &obs)?;
        }
        total_len += step;
    }
    Ok(EvalReport {
        episodes,
        success_rate: successes as f64 / episodes as f64,
        mean_episode_length: total_len as f64 / episodes as f64,
    })
}

pub fn save_agent(agent: &Agent, cfg: &AgentConfig, env_steps: u64, path: &Path) -> Result<()> {
    agent.to_checkpoint(cfg, env_steps)?.save(path)
}
