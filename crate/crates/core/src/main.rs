use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rlplace::env::{
    build_device_env, build_grid_env, ConstraintMode, DeviceSpec, GridSpec, PlacementEnv, RewardSpec, Shaping,
};
use rlplace::graph::{generate_synthetic, load_graph, Family, Graph, GraphKind, SynthParams};
use rlplace::oracle::{oracle_report, DEFAULT_LIMIT};
use rlplace::policy::PolicyParams;
use rlplace::trainer::{evaluate, train};
use rlplace::{config, Error, Result};

#[derive(Parser)]
#[command(name = "rlplace", version, about = "Learned graph placement with policy gradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Parallel rollout threads; output does not depend on this.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate trained parameters on a graph.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        env: EnvArgs,
    },
    /// Generate a synthetic graph.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        nodes: usize,
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = KindArg::Device)]
        kind: KindArg,
        #[arg(long)]
        op_types: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        edge_prob: Option<f64>,
    },
    /// Enumerate placements and report the optimum.
    Oracle {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LIMIT)]
        limit: u64,
        #[command(flatten)]
        env: EnvArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Chain,
    Layered,
    RandomDag,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Device,
    Grid,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapingArg {
    Identity,
    Sqrt,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConstraintArg {
    Mask,
    Penalty,
}

/// Environment settings for `eval` and `oracle`; the graph's kind picks
/// which group applies.
#[derive(Args)]
struct EnvArgs {
    #[arg(long, default_value_t = 2)]
    devices: usize,
    /// Per-device memory capacity. Defaults to the graph's total memory.
    #[arg(long)]
    capacity: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    bandwidth: f64,
    /// Grid width. Defaults to the smallest square holding every node.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long, default_value_t = 1)]
    cell_capacity: usize,
    #[arg(long, default_value_t = 1.0)]
    density_weight: f64,
    #[arg(long)]
    step_rewards: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum, default_value_t = ShapingArg::Identity)]
    shaping: ShapingArg,
    #[arg(long, value_enum, default_value_t = ConstraintArg::Mask)]
    constraint: ConstraintArg,
}

impl EnvArgs {
    fn reward(&self) -> RewardSpec {
        let d = RewardSpec::default();
        RewardSpec {
            alpha: self.alpha.unwrap_or(d.alpha),
            beta: self.beta.unwrap_or(d.beta),
            lambda: self.lambda.unwrap_or(d.lambda),
            shaping: match self.shaping {
                ShapingArg::Identity => Shaping::Identity,
                ShapingArg::Sqrt => Shaping::Sqrt,
            },
            constraint_mode: match self.constraint {
                ConstraintArg::Mask => ConstraintMode::Mask,
                ConstraintArg::Penalty => ConstraintMode::Penalty,
            },
        }
    }

    fn build(&self, graph: Graph) -> Result<PlacementEnv> {
        let reward = self.reward();
        match graph.kind() {
            GraphKind::Device => {
                let spec = DeviceSpec {
                    devices: self.devices,
                    mem_capacity: self.capacity.unwrap_or_else(|| graph.total_memory()),
                    bandwidth: self.bandwidth,
                };
                Ok(PlacementEnv::Device(build_device_env(graph, spec, reward)?))
            }
            GraphKind::Grid => {
                let side = (graph.len() as f64).sqrt().ceil() as usize;
                let spec = GridSpec {
                    width: self.width.unwrap_or(side),
                    height: self.height.unwrap_or(side),
                    cell_capacity: self.cell_capacity,
                    density_weight: self.density_weight,
                };
                Ok(PlacementEnv::Grid(build_grid_env(graph, spec, reward, self.step_rewards)?))
            }
        }
    }
}

#[derive(Serialize)]
struct BestEntry {
    graph: String,
    placement: Option<Vec<usize>>,
    episode_return: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    greedy_return: f64,
    best_return: f64,
    best_placement: Vec<usize>,
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, threads } => {
            let mut run = config::load_run(&config)?;
            if let Some(t) = threads {
                run.config.trainer.threads = t;
            }
            let out = train(&run.envs, &run.config.policy, &run.config.trainer)?;
            let dir = &run.output_dir;
            std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            out.params.save(dir.join("params.json"))?;
            out.history.save_csv(dir.join("history.csv"))?;
            let best: Vec<BestEntry> = run
                .config
                .graphs
                .iter()
                .zip(&out.best)
                .map(|(g, b)| BestEntry {
                    graph: g.display().to_string(),
                    placement: b.as_ref().map(|b| b.placement.clone()),
                    episode_return: b.as_ref().map(|b| b.episode_return),
                })
                .collect();
            write_file(&dir.join("best_placement.json"), &(to_json(&best) + "\n"))?;
            let last = out.history.records.last();
            println!(
                "{}",
                serde_json::json!({
                    "iterations": out.history.records.len(),
                    "best_return": last.map(|r| r.best_return).filter(|r| r.is_finite()),
                    "output_dir": dir.display().to_string(),
                })
            );
        }
        Command::Eval { params, graph, samples, seed, env } => {
            let params = PolicyParams::load(&params)?;
            let env = env.build(load_graph(&graph)?)?;
            let e = evaluate(&env, &params, samples, seed)?;
            let report =
                EvalReport { greedy_return: e.greedy_return, best_return: e.best_return, best_placement: e.best_placement };
            println!("{}", to_json(&report));
        }
        Command::Gen { seed, nodes, family, out, kind, op_types, layers, edge_prob } => {
            let d = SynthParams::default();
            let params = SynthParams {
                kind: match kind {
                    KindArg::Device => GraphKind::Device,
                    KindArg::Grid => GraphKind::Grid,
                },
                op_types: op_types.unwrap_or(d.op_types),
                layers: layers.unwrap_or(d.layers),
                edge_prob: edge_prob.unwrap_or(d.edge_prob),
                ..d
            };
            let family = match family {
                FamilyArg::Chain => Family::Chain,
                FamilyArg::Layered => Family::Layered,
                FamilyArg::RandomDag => Family::RandomDag,
            };
            let g = generate_synthetic(seed, nodes, family, &params)?;
            g.save(&out)?;
            println!("{}", serde_json::json!({ "N": g.len(), "edges": g.edges().len() }));
        }
        Command::Oracle { graph, params, limit, env } => {
            let env = env.build(load_graph(&graph)?)?;
            let params = params.map(PolicyParams::load).transpose()?;
            println!("{}", to_json(&oracle_report(&env, params.as_ref(), limit)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("ERROR UsageError: {first}");
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("ERROR {}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
