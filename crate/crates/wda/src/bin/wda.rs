//! Command-line front end: dataset synthesis, the three training phases,
//! evaluation, and report rendering.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use wda::data::io::{load_points_csv, load_stack, save_dataset, save_points_csv, StackLayout};
use wda::data::synth::{sparsify, synth_full};
use wda::data::{sample_sparse_points, Domain, DomainSample, SparsePointBudget};
use wda::error::{Result, WdaError};
use wda::harness::{
    adapt, count_multiscale, counter_checkpoint, evaluate_model, train_counter, train_source,
    write_eval_outputs, write_jsonl, AdaptAblation, AdaptResume, EvalBundle, RunConfig,
};
use wda::net::checkpoint::{load_g1, load_g2, Checkpoint};
use wda::net::model_info;
use wda::sar::refine_sample;

#[derive(Parser)]
#[command(name = "wda", about = "Weakly supervised domain adaptation for instance-dense segmentation", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// CPU-scale defaults: 128 px images, 2k adaptation iterations.
    Desk,
    /// Paper-scale defaults: 512 px patches, 20k iterations.
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Full,
    AdversarialOnly,
    NoConsistency,
}

impl Ablation {
    fn to_flags(self) -> AdaptAblation {
        match self {
            Ablation::Full => AdaptAblation::full(),
            Ablation::AdversarialOnly => AdaptAblation::adversarial_only(),
            Ablation::NoConsistency => AdaptAblation::no_consistency(),
        }
    }
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Effective-config TOML; wins over --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml(p)?,
            None => match self.preset {
                Preset::Desk => RunConfig::desk(),
                Preset::Full => RunConfig::full(),
            },
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generates the synthetic two-domain dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output root; writes source/, target_train/, target_test/.
        #[arg(long)]
        out: PathBuf,
        /// Also writes target_train_full/ with dense masks kept.
        #[arg(long)]
        keep_truth: bool,
    },
    /// Subsamples a points CSV to simulate sparser annotation.
    SamplePoints {
        /// Input points CSV (slice,row,col).
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Snaps source masks to image boundaries before training.
    RefineSourceLabels {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (defaults to the config's source path).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the multi-task network on the densely labeled source set.
    TrainSource {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Trains the counting network from a source checkpoint.
    TrainCount {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Source-trained multi-task checkpoint to warm-start the trunk.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapts the source model to the sparsely annotated target domain.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        g1: PathBuf,
        #[arg(long)]
        g2: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        ablation: Ablation,
        /// Generator checkpoint from a refresh boundary, to continue from.
        #[arg(long, requires = "resume_d")]
        resume_g1: Option<PathBuf>,
        #[arg(long, requires = "resume_g1")]
        resume_d: Option<PathBuf>,
    },
    /// Scores a checkpoint against a densely labeled split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split name recorded in the report.
        #[arg(long, default_value = "target_test")]
        split: String,
    },
    /// Prints parameter counts and output shapes for the configured nets.
    ModelInfo {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Renders loss curves and metric bars from logs and reports.
    Report {
        /// Iteration logs (JSONL); one curve set per file.
        #[arg(long)]
        log: Vec<PathBuf>,
        /// Evaluation reports (JSON); one bar group per file.
        #[arg(long)]
        eval: Vec<PathBuf>,
        /// Output image; .png or .svg.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_split(explicit: Option<&Path>, configured: Option<&Path>, layout: StackLayout, domain: Domain, what: &str) -> Result<Vec<DomainSample>> {
    let path = explicit
        .or(configured)
        .ok_or_else(|| WdaError::Config(format!("no {what} dataset given (flag or config.data)")))?;
    load_stack(path, layout, domain)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { cfg, out, keep_truth } => {
            let mut cfg = cfg.load()?;
            let sets = synth_full(&cfg.synth, cfg.seed)?;
            save_dataset(&out.join("source"), &sets.source)?;
            let weak = sparsify(&sets.target_train, cfg.synth.sparse_ratio, cfg.seed)?;
            save_dataset(&out.join("target_train"), &weak)?;
            if keep_truth {
                save_dataset(&out.join("target_train_full"), &sets.target_train)?;
            }
            let mut test = sets.target_test;
            for s in &mut test {
                s.points = None;
            }
            save_dataset(&out.join("target_test"), &test)?;
            // The emitted config points at the freshly written splits so
            // later stages only need --config <out>/config.toml.
            cfg.data.source = Some(out.join("source"));
            cfg.data.target_train = Some(out.join("target_train"));
            cfg.data.target_test = Some(out.join("target_test"));
            cfg.to_toml(&out.join("config.toml"))?;
            println!(
                "wrote {} source, {} target-train, {} target-test slices under {}",
                sets.source.len(),
                weak.len(),
                test.len(),
                out.display()
            );
        }
        Cmd::SamplePoints { points, ratio, seed, out } => {
            let full = load_points_csv(&points)?;
            let mut sparse = std::collections::BTreeMap::new();
            for (i, (slice, pts)) in full.iter().enumerate() {
                let budget = SparsePointBudget { ratio, seed: seed.wrapping_add(i as u64) };
                sparse.insert(slice.clone(), sample_sparse_points(pts, budget)?);
            }
            save_points_csv(&out, &sparse)?;
            let n: usize = sparse.values().map(Vec::len).sum();
            println!("kept {n} points across {} slices", sparse.len());
        }
        Cmd::RefineSourceLabels { cfg, data, out } => {
            let cfg = cfg.load()?;
            let samples = load_split(
                data.as_deref(),
                cfg.data.source.as_deref(),
                cfg.data.layout,
                Domain::Source,
                "source",
            )?;
            let refined: Result<Vec<_>> =
                samples.iter().map(|s| refine_sample(s, &cfg.sar)).collect();
            save_dataset(&out, &refined?)?;
            println!("refined {} slices into {}", samples.len(), out.display());
        }
        Cmd::TrainSource { cfg, data, out, resume } => {
            let cfg = cfg.load()?;
            let samples = load_split(
                data.as_deref(),
                cfg.data.source.as_deref(),
                cfg.data.layout,
                Domain::Source,
                "source",
            )?;
            let resume_ck = resume.as_deref().map(Checkpoint::load).transpose()?;
            let outcome = train_source(&cfg, &samples, resume_ck.as_ref(), Some(&out))?;
            std::fs::create_dir_all(&out)?;
            outcome.checkpoint.save(&out.join("g1_source.ckpt"))?;
            write_jsonl(&out.join("source_log.jsonl"), &outcome.log)?;
            let last = outcome.log.last().expect("nonempty training log");
            println!(
                "source training done: {} iters, final loss {:.4} -> {}",
                cfg.optim.source_iters,
                last.total,
                out.join("g1_source.ckpt").display()
            );
        }
        Cmd::TrainCount { cfg, data, init, out } => {
            let cfg = cfg.load()?;
            let samples = load_split(
                data.as_deref(),
                cfg.data.source.as_deref(),
                cfg.data.layout,
                Domain::Source,
                "source",
            )?;
            let (g1, _) = load_g1(&init)?;
            let (g2, log) = train_counter(&cfg, &samples, &g1)?;
            std::fs::create_dir_all(&out)?;
            counter_checkpoint(&g2, &cfg, cfg.optim.counter_iters).save(&out.join("g2.ckpt"))?;
            write_jsonl(&out.join("counter_log.jsonl"), &log)?;
            // Multi-scale vs native-scale delta on the training images,
            // so the scale averaging is visible in the logs.
            let mut delta = 0.0;
            for s in &samples {
                let (multi, per) = count_multiscale(&g2, &s.image, &cfg.eval.count_scales)?;
                let native = per[cfg.eval.count_scales.iter().position(|&x| x == 1.0).unwrap_or(0)];
                delta += (multi - native).abs();
            }
            println!(
                "counter training done: {} iters, mean |multi-scale - native| = {:.3} over {} slices",
                cfg.optim.counter_iters,
                delta / samples.len() as f64,
                samples.len()
            );
        }
        Cmd::Adapt { cfg, source, target, g1, g2, out, ablation, resume_g1, resume_d } => {
            let cfg = cfg.load()?;
            let src = load_split(
                source.as_deref(),
                cfg.data.source.as_deref(),
                cfg.data.layout,
                Domain::Source,
                "source",
            )?;
            let tgt = load_split(
                target.as_deref(),
                cfg.data.target_train.as_deref(),
                cfg.data.layout,
                Domain::Target,
                "target-train",
            )?;
            let (g1_init, _) = load_g1(&g1)?;
            let (g2_net, _) = load_g2(&g2)?;
            let resume = match (&resume_g1, &resume_d) {
                (Some(a), Some(b)) => {
                    Some(AdaptResume { g1: Checkpoint::load(a)?, d: Checkpoint::load(b)? })
                }
                _ => None,
            };
            let outcome = adapt(
                &cfg,
                &src,
                &tgt,
                &g1_init,
                &g2_net,
                &ablation.to_flags(),
                Some(&out),
                resume.as_ref(),
            )?;
            let last = outcome.log.last().expect("nonempty adaptation log");
            println!(
                "adaptation done: {} iters, final loss {:.4}, lambda_c {:.3} -> {}",
                cfg.optim.max_iters,
                last.total,
                last.lambda_c.unwrap_or(0.0),
                out.join("adapt_g1_final.ckpt").display()
            );
        }
        Cmd::Evaluate { cfg, data, checkpoint, out, split } => {
            let cfg = cfg.load()?;
            let samples = load_split(
                data.as_deref(),
                cfg.data.target_test.as_deref(),
                cfg.data.layout,
                Domain::Target,
                "evaluation",
            )?;
            let (g1, meta) = load_g1(&checkpoint)?;
            let (report, artifacts) = evaluate_model(&g1, &samples, &cfg.eval)?;
            let bundle = EvalBundle::new(&cfg, meta.iters, &split, report);
            write_eval_outputs(&out, &bundle, &artifacts, &cfg.eval)?;
            let r = &bundle.report;
            println!(
                "{split}: dice {:.4} aji {:.4} pq {:.4} (sq {:.4} dq {:.4}, tp {} fp {} fn {}) -> {}",
                r.dice,
                r.aji,
                r.pq,
                r.sq,
                r.dq,
                r.tp,
                r.fp,
                r.fn_,
                out.join("report.json").display()
            );
        }
        Cmd::ModelInfo { cfg } => {
            let cfg = cfg.load()?;
            let infos = model_info(&cfg.model.backbone, &cfg.model.discriminator, cfg.eval.patch_hw)?;
            for info in infos {
                println!(
                    "{}: {} tensors, {} parameters, input {:?}",
                    info.kind, info.tensors, info.parameters, info.input_shape
                );
                for (name, shape) in info.output_shapes {
                    println!("  {name}: {shape:?}");
                }
            }
        }
        Cmd::Report { log, eval, out } => {
            wda::harness::report::render_report(&log, &eval, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
