//! `forecaster` command-line front end.
//!
//! ```text
//! forecaster train      --config run.toml --seeds 1,2,3 --out runs/ [--baseline]
//! forecaster transfer   --config pre.toml --finetune-config ft.toml --arms full,scratch --seeds 1,2 --out runs/
//! forecaster eval       --checkpoint ckpt.bin --config env.toml --episodes 20 --seeds 1
//! forecaster plan-debug --checkpoint ckpt.bin --env-seed 4 --branching 3 --depth 2
//! forecaster aggregate  --column success runs/run_1.csv runs/run_2.csv
//! ```
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use forecaster::checkpoint::{Checkpoint, COMPONENT_NAMES};
use forecaster::config::AgentConfig;
use forecaster::env::MazeLayout;
use forecaster::metrics::{self, median_with_failures, MetricsRow};
use forecaster::orchestrator::{
    build_layout, evaluate, run_transfer, substream, Agent, Stream, TransferArm, Trainer,
};
use forecaster::planner::{self, PlanningModels};
use forecaster::goal_codec::SampleMode;
use forecaster::Error;

#[derive(Parser, Debug)]
#[command(name = "forecaster", version, about = "Train and inspect goal-planning hierarchical agents on gridworld mazes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one agent per seed and write run_<seed>.csv files.
    Train(TrainArgs),
    /// Pretrain on one config, fine-tune each arm on another.
    Transfer(TransferArgs),
    /// Greedy rollouts from a checkpoint.
    Eval(EvalArgs),
    /// Print the planning tree from a maze's initial state.
    PlanDebug(PlanDebugArgs),
    /// Mean and standard error of one metrics column across runs.
    Aggregate(AggregateArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated, distinct.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Flat manager: one greedy goal per segment, no tree search.
    #[arg(long)]
    baseline: bool,
    /// Initial parameters for the components named in --load-components.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    load_components: Vec<String>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    /// Pretraining config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    finetune_config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "full,no_abstract,scratch")]
    arms: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment config; defaults to the checkpoint's own.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    episodes: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
}

#[derive(Args, Debug)]
struct PlanDebugArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    env_seed: u64,
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    #[arg(long, default_value = "success")]
    column: String,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    let distinct: BTreeSet<_> = seeds.iter().collect();
    if seeds.is_empty() || distinct.len() != seeds.len() {
        return Err(Error::Usage(format!("--seeds must be nonempty and distinct, got {seeds:?}")).into());
    }
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn with_seed(cfg: &AgentConfig, seed: u64) -> AgentConfig {
    AgentConfig {
        seed,
        ..cfg.clone()
    }
}

fn fmt_opt(v: Option<u64>) -> String {
    v.map_or_else(|| "-".to_string(), |n| n.to_string())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    check_seeds(&args.seeds)?;
    let mut cfg = AgentConfig::load(&args.config)?;
    if args.baseline {
        eprintln!(
            "notice: --baseline turns tree search off; branching={} and depth={} are ignored",
            cfg.branching, cfg.depth
        );
        cfg.planner = false;
    }
    let pretrained = match (&args.checkpoint, args.load_components.is_empty()) {
        (Some(p), _) => Some(Checkpoint::load(p).with_context(|| format!("reading {}", p.display()))?),
        (None, false) => bail!(Error::Usage("--load-components needs --checkpoint".into())),
        (None, true) => None,
    };
    let names: Vec<&str> = args.load_components.iter().map(String::as_str).collect();
    prepare_out(&args.out)?;
    println!("seed\tepisodes\tsuccesses\tfirst_success_episode\tfirst_success_step\tfinal_success_rate");
    for &seed in &args.seeds {
        let run_cfg = with_seed(&cfg, seed);
        let mut agent = Agent::new(&run_cfg)?;
        if let Some(c) = &pretrained {
            agent.load_components(c, &names)?;
        }
        let mut trainer = Trainer::new(run_cfg, agent)?;
        let out = trainer.run()?;
        metrics::write_csv(&args.out.join(format!("run_{seed}.csv")), &out.rows)?;
        trainer.checkpoint()?.save(&args.out.join(format!("checkpoint_{seed}.bin")))?;
        let s = out.summary;
        println!(
            "{seed}\t{}\t{}\t{}\t{}\t{:.3}",
            s.episodes,
            s.successes,
            fmt_opt(s.first_success_episode),
            fmt_opt(s.first_success_step),
            s.final_success_rate
        );
    }
    Ok(())
}

fn cmd_transfer(args: TransferArgs) -> Result<()> {
    check_seeds(&args.seeds)?;
    let arms = args
        .arms
        .iter()
        .map(|a| a.parse::<TransferArm>())
        .collect::<forecaster::Result<Vec<_>>>()?;
    if arms.is_empty() || arms.iter().collect::<BTreeSet<_>>().len() != arms.len() {
        bail!(Error::Usage("--arms must be nonempty and distinct".into()));
    }
    let pre = AgentConfig::load(&args.config)?;
    let fine = AgentConfig::load(&args.finetune_config)?;
    prepare_out(&args.out)?;
    for arm in &arms {
        prepare_out(&args.out.join(arm.name()))?;
    }
    let mut first_episode: Vec<Vec<Option<u64>>> = vec![Vec::new(); arms.len()];
    let mut first_step: Vec<Vec<Option<u64>>> = vec![Vec::new(); arms.len()];
    for &seed in &args.seeds {
        let results = run_transfer(&with_seed(&pre, seed), &with_seed(&fine, seed), &arms)?;
        for (i, (arm, out)) in results.into_iter().enumerate() {
            metrics::write_csv(&args.out.join(arm.name()).join(format!("run_{seed}.csv")), &out.rows)?;
            first_episode[i].push(out.summary.first_success_episode);
            first_step[i].push(out.summary.first_success_step);
        }
    }
    let mut w = csv::Writer::from_path(args.out.join("summary.csv"))?;
    w.write_record(["arm", "seeds", "median_episodes_to_first_success", "median_steps_to_first_success"])?;
    println!("arm\tseeds\tmedian_episodes_to_first_success\tmedian_steps_to_first_success");
    for (i, arm) in arms.iter().enumerate() {
        let me = median_with_failures(&first_episode[i]);
        let ms = median_with_failures(&first_step[i]);
        w.write_record([
            arm.name().to_string(),
            args.seeds.len().to_string(),
            me.to_string(),
            ms.to_string(),
        ])?;
        println!("{}\t{}\t{me}\t{ms}", arm.name(), args.seeds.len());
    }
    w.flush()?;
    Ok(())
}

fn checkpoint_config(ckpt: &Checkpoint) -> Result<AgentConfig> {
    AgentConfig::parse(&ckpt.config).context("checkpoint carries an invalid config snapshot")
}

fn agent_from_checkpoint(ckpt: &Checkpoint, cfg: &AgentConfig) -> Result<Agent> {
    let mut agent = Agent::new(cfg)?;
    agent.load_components(ckpt, &COMPONENT_NAMES)?;
    Ok(agent)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if args.episodes == 0 {
        bail!(Error::Usage("--episodes must be at least 1".into()));
    }
    check_seeds(&args.seeds)?;
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let model_cfg = checkpoint_config(&ckpt)?;
    let env_cfg = match &args.config {
        Some(p) => AgentConfig::load(p)?,
        None => model_cfg.clone(),
    };
    println!("seed\tepisodes\tsuccess_rate\tmean_episode_length");
    for &seed in &args.seeds {
        let cfg = AgentConfig {
            seed,
            size_class: env_cfg.size_class,
            maze_file: env_cfg.maze_file.clone(),
            maze_seed: env_cfg.maze_seed,
            max_episode_steps: env_cfg.max_episode_steps,
            planner: env_cfg.planner,
            branching: env_cfg.branching,
            depth: env_cfg.depth,
            ..model_cfg.clone()
        };
        let agent = agent_from_checkpoint(&ckpt, &cfg)?;
        let layout = build_layout(&cfg)?;
        let r = evaluate(&agent, &cfg, layout, args.episodes)?;
        println!("{seed}\t{}\t{:.4}\t{:.2}", r.episodes, r.success_rate, r.mean_episode_length);
    }
    Ok(())
}

fn cmd_plan_debug(args: PlanDebugArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let cfg = checkpoint_config(&ckpt)?;
    let agent = agent_from_checkpoint(&ckpt, &cfg)?;
    let branching = args.branching.unwrap_or(cfg.branching);
    let depth = args.depth.unwrap_or(cfg.depth);
    let layout = match &cfg.maze_file {
        Some(p) => MazeLayout::load(&fs::read_to_string(p).with_context(|| format!("reading maze {p}"))?)?,
        None => MazeLayout::generate(cfg.size_class, args.env_seed),
    };
    let obs = layout.observe(layout.start(), 0);
    let root = agent.world_model.encode_cold(&obs)?;
    let models = PlanningModels {
        manager: &agent.manager,
        codec: &agent.codec,
        abstract_model: &agent.abstract_model,
        branching,
        depth,
        mode: SampleMode::Sample,
    };
    let tree = planner::build_tree(&root, &models, &mut substream(args.env_seed, Stream::Planner))?;
    print!("{}", planner::dump_tree(&tree, cfg.option_discount()));
    Ok(())
}

fn cmd_aggregate(args: AggregateArgs) -> Result<()> {
    let runs = args
        .files
        .iter()
        .map(|p| metrics::read_csv(p))
        .collect::<forecaster::Result<Vec<Vec<MetricsRow>>>>()?;
    let text = metrics::aggregate(&runs, &args.column)?;
    match &args.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let is_usage = err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<Error>(),
            Some(Error::Config(_) | Error::Usage(_))
        )
    });
    if is_usage {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::PlanDebug(a) => cmd_plan_debug(a),
        Command::Aggregate(a) => cmd_aggregate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_map_to_two() {
        let e: anyhow::Error = Error::Config("x".into()).into();
        assert_eq!(exit_code(&e), 2);
        let e = anyhow::Error::from(Error::Usage("x".into())).context("outer");
        assert_eq!(exit_code(&e), 2);
        let e: anyhow::Error = Error::Format("x".into()).into();
        assert_eq!(exit_code(&e), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 3);
    }

    #[test]
    fn seeds_must_be_distinct() {
        assert!(check_seeds(&[1, 2]).is_ok());
        assert!(check_seeds(&[1, 1]).is_err());
        assert!(check_seeds(&[]).is_err());
    }
}
