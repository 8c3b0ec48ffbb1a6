use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use spearmm::archmap::{ArchProfile, ComponentKind};
use spearmm::checkpoint::{self, Checkpoint, DtypePolicy};
use spearmm::evaluator::{CommandEvaluator, Evaluator, ProxyEvaluator};
use spearmm::harness::{self, frontier, CheckpointDigests, Perturbation, SynthSpec};
use spearmm::merger;
use spearmm::metrics::{MetricConfig, SnrSource};
use spearmm::planner::{self, MergePlan, Policy, PolicyName, RestoreEnd, ScoredRow, SelectionMode};
use spearmm::search::{self, Dim, DimRange, SearchSpace};
use spearmm::{canonical, Error, Result};

#[derive(Parser)]
#[command(name = "spearmm", version, about = "Spectral importance scoring and selective restoration of adapted checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every aligned tensor pair and write the importance report.
    Analyze {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        metrics: MetricArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Report path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a restoration plan.
    Plan {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        metrics: MetricArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the merged checkpoint and its plan (`<out>.plan.json`).
    Merge {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        metrics: MetricArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Apply an existing plan instead of planning from the policy flags.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep restoration fractions and record evaluator scores as CSV.
    Frontier {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        metrics: MetricArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated fractions (default 0,0.1,...,1).
        #[arg(long)]
        grid: Option<String>,
        /// Separate attention fractions; the sweep becomes a cartesian grid.
        #[arg(long)]
        grid_attn: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer heatmap table from an analysis report.
    Heatmap {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bayesian search over fractions and t; writes one trial per line.
    Search {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        metrics: MetricArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Weight of the general score in the objective.
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 20)]
        budget: usize,
        #[arg(long, default_value_t = 8)]
        init_points: usize,
        /// Dimensions to search, e.g. `frac_mlp,frac_attn`.
        #[arg(long, default_value = "frac_mlp,frac_attn,t")]
        dims: String,
        /// Write the best configuration's merged checkpoint here.
        #[arg(long)]
        merged_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a seeded base/adapted checkpoint pair.
    Synth {
        #[arg(long, default_value_t = 8)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        lowrank_rank: usize,
        #[arg(long, default_value_t = 1.0)]
        lowrank_scale: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_scale: f64,
        /// Comma-separated component kinds (default: all projections).
        #[arg(long, default_value = "")]
        target_components: String,
        /// Comma-separated layer indices (default: all layers).
        #[arg(long, default_value = "")]
        target_layers: String,
        #[arg(long)]
        out_base: PathBuf,
        #[arg(long)]
        out_adapted: PathBuf,
    },
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    adapted: PathBuf,
    /// JSON array of {"pattern", "component"} rules (default: LLaMA names).
    #[arg(long)]
    arch_profile: Option<PathBuf>,
}

#[derive(Args)]
struct MetricArgs {
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 16)]
    k_top: usize,
    /// adapted, base, or mean.
    #[arg(long, default_value = "adapted")]
    snr_source: String,
}

#[derive(Args)]
struct PolicyArgs {
    /// conservative, balanced, aggressive, or custom.
    #[arg(long, default_value = "balanced")]
    policy: String,
    #[arg(long)]
    frac_mlp: Option<f64>,
    #[arg(long)]
    frac_attn: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    /// combined, swci_only, svdr_only, snr_only, or random.
    #[arg(long, default_value = "combined")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// top or bottom.
    #[arg(long, default_value = "top")]
    restore_end: String,
}

#[derive(Args)]
struct EvalArgs {
    /// `proxy` or a command invoked as `<cmd> --model <path>`.
    #[arg(long, default_value = "proxy")]
    evaluator: String,
    /// Per-evaluation timeout in seconds.
    #[arg(long, default_value_t = 600)]
    timeout: u64,
}

struct Loaded {
    base: Checkpoint,
    adapted: Checkpoint,
    digests: CheckpointDigests,
    profile: ArchProfile,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| {
        checkpoint::CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(path) => std::fs::write(path, bytes).map_err(|source| Error::Output {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes).map_err(|source| Error::Output {
                path: "<stdout>".into(),
                source,
            })
        }
    }
}

impl Inputs {
    fn load(&self) -> Result<Loaded> {
        let base_bytes = read(&self.base)?;
        let adapted_bytes = read(&self.adapted)?;
        let profile = match &self.arch_profile {
            Some(p) => ArchProfile::from_file(p)?,
            None => ArchProfile::llama(),
        };
        Ok(Loaded {
            base: checkpoint::from_bytes(&base_bytes)?,
            adapted: checkpoint::from_bytes(&adapted_bytes)?,
            digests: CheckpointDigests::of_bytes(&base_bytes, &adapted_bytes),
            profile,
        })
    }
}

impl MetricArgs {
    fn config(&self) -> Result<MetricConfig> {
        let snr_source = match self.snr_source.as_str() {
            "adapted" => SnrSource::Adapted,
            "base" => SnrSource::Base,
            "mean" => SnrSource::Mean,
            other => return Err(Error::Usage(format!("unknown snr source {other:?}"))),
        };
        let cfg = MetricConfig {
            k_top: self.k_top,
            alpha: self.alpha,
            beta: self.beta,
            snr_source,
            ..MetricConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl PolicyArgs {
    fn policy(&self) -> Result<Policy> {
        let mut p = Policy::preset(self.policy.parse::<PolicyName>()?);
        if self.frac_mlp.is_some() || self.frac_attn.is_some() {
            p.name = PolicyName::Custom;
        }
        p.frac_mlp = self.frac_mlp.unwrap_or(p.frac_mlp);
        p.frac_attn = self.frac_attn.unwrap_or(p.frac_attn);
        p.t = self.t.unwrap_or(p.t);
        p.mode = self.mode.parse::<SelectionMode>()?;
        p.seed = self.seed;
        p.restore_end = self.restore_end.parse::<RestoreEnd>()?;
        p.validate()?;
        Ok(p)
    }
}

impl EvalArgs {
    fn build<'a>(&self, base: &'a Checkpoint, adapted: &'a Checkpoint) -> Result<Box<dyn Evaluator + 'a>> {
        if self.evaluator == "proxy" {
            return Ok(Box::new(ProxyEvaluator::new(base, adapted)));
        }
        let timeout = Duration::from_secs(self.timeout);
        Ok(Box::new(CommandEvaluator::new(&self.evaluator, timeout).map_err(|e| Error::Usage(e.to_string()))?))
    }
}

fn score(inputs: &Loaded, metrics: &MetricArgs) -> Result<Vec<ScoredRow>> {
    harness::score_pairs(&inputs.base, &inputs.adapted, &inputs.profile, &metrics.config()?)
}

fn split_list(text: &str) -> impl Iterator<Item = &str> {
    text.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_dims(text: &str) -> Result<Vec<DimRange>> {
    split_list(text)
        .map(|s| {
            let name = match s {
                "frac_mlp" => Dim::FracMlp,
                "frac_attn" => Dim::FracAttn,
                "t" => Dim::T,
                other => return Err(Error::Usage(format!("unknown search dimension {other:?}"))),
            };
            Ok(DimRange { name, lo: 0.0, hi: 1.0 })
        })
        .collect()
}

fn plan_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".plan.json");
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze { inputs, metrics, policy, out } => {
            let l = inputs.load()?;
            let a = harness::analyze(&l.base, &l.adapted, l.digests, &l.profile, &metrics.config()?, &policy.policy()?)?;
            write(out.as_deref(), (a.report.to_json() + "\n").as_bytes())
        }
        Command::Plan { inputs, metrics, policy, out } => {
            let l = inputs.load()?;
            let plan = planner::build_plan(&score(&l, &metrics)?, &policy.policy()?)?;
            write(out.as_deref(), (plan.to_json() + "\n").as_bytes())
        }
        Command::Merge { inputs, metrics, policy, plan, out } => {
            let l = inputs.load()?;
            let plan = match plan {
                Some(p) => MergePlan::from_json(&read_text(&p)?)?,
                None => planner::build_plan(&score(&l, &metrics)?, &policy.policy()?)?,
            };
            let merged = merger::apply_plan(&l.base, &l.adapted, &plan)?;
            let bytes = checkpoint::to_bytes(&merged, DtypePolicy::ForceF32)?;
            write(Some(&out), &bytes)?;
            write(Some(&plan_path(&out)), (plan.to_json() + "\n").as_bytes())
        }
        Command::Frontier { inputs, metrics, policy, eval, grid, grid_attn, out } => {
            let l = inputs.load()?;
            let scored = score(&l, &metrics)?;
            let mlp = match grid {
                Some(g) => frontier::parse_grid(&g)?,
                None => frontier::default_grid(),
            };
            let attn = grid_attn.map(|g| frontier::parse_grid(&g)).transpose()?;
            let evaluator = eval.build(&l.base, &l.adapted)?;
            let points = frontier::frontier(
                &l.base,
                &l.adapted,
                &scored,
                &policy.policy()?,
                &mlp,
                attn.as_deref(),
                evaluator.as_ref(),
            )?;
            write(out.as_deref(), frontier::frontier_csv(&points).as_bytes())
        }
        Command::Heatmap { report, out } => {
            let report = harness::AnalysisReport::from_json(&read_text(&report)?)?;
            write(out.as_deref(), harness::heatmap(&report)?.to_csv().as_bytes())
        }
        Command::Search {
            inputs,
            metrics,
            policy,
            eval,
            lambda,
            budget,
            init_points,
            dims,
            merged_out,
            out,
        } => {
            let l = inputs.load()?;
            let scored = score(&l, &metrics)?;
            let template = policy.policy()?;
            let space = SearchSpace {
                dims: parse_dims(&dims)?,
                budget,
                init_points,
                seed: template.seed,
            };
            let evaluator = eval.build(&l.base, &l.adapted)?;
            let outcome =
                search::run_search(&l.base, &l.adapted, &scored, &template, &space, evaluator.as_ref(), lambda)?;
            let mut lines = String::new();
            for trial in &outcome.history {
                lines.push_str(&canonical::to_canonical_json(trial).expect("trial serializes"));
                lines.push('\n');
            }
            write(out.as_deref(), lines.as_bytes())?;
            eprintln!(
                "best trial {}: objective {}",
                outcome.best.index,
                canonical::format_float(outcome.best.objective)
            );
            if let Some(path) = merged_out {
                let best = search::policy_for(&template, &outcome.best.config);
                let plan = planner::build_plan(&scored, &best)?;
                let merged = merger::apply_plan(&l.base, &l.adapted, &plan)?;
                write(Some(&path), &checkpoint::to_bytes(&merged, DtypePolicy::ForceF32)?)?;
                write(Some(&plan_path(&path)), (plan.to_json() + "\n").as_bytes())?;
            }
            Ok(())
        }
        Command::Synth {
            layers,
            hidden,
            seed,
            lowrank_rank,
            lowrank_scale,
            noise_scale,
            target_components,
            target_layers,
            out_base,
            out_adapted,
        } => {
            let target_components = split_list(&target_components)
                .map(|s| s.parse::<ComponentKind>())
                .collect::<Result<Vec<_>, _>>()?;
            let target_layers = split_list(&target_layers)
                .map(|s| s.parse::<usize>().map_err(|_| Error::Usage(format!("bad layer index {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let spec = SynthSpec {
                layers,
                hidden,
                seed,
                perturbation: Perturbation {
                    lowrank_rank,
                    lowrank_scale,
                    noise_scale,
                    target_components,
                    target_layers,
                },
            };
            let (base, adapted) = harness::synthesize(&spec)?;
            write(Some(&out_base), &checkpoint::to_bytes(&base, DtypePolicy::Preserve)?)?;
            write(Some(&out_adapted), &checkpoint::to_bytes(&adapted, DtypePolicy::Preserve)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
