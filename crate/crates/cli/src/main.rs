//! `mimq`: pre-train, fine-tune, run ablation grids, dump scenes and
//! attention maps, and run the self-check suite.
//!
//! Exit codes: 0 success, 1 failed checks or I/O failure, 2 usage or
//! configuration error, 3 numeric abort, 4 incompatible checkpoint or load
//! policy.

mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mimq_core::ablation::{run_ablation, Ablation};
use mimq_core::checkpoint::{write_atomic, Checkpoint};
use mimq_core::config::Config;
use mimq_core::data::dump::{dump_scene, pgm_bytes};
use mimq_core::data::metrics::EvalResult;
use mimq_core::data::{gen_scene, scene_seed, SceneKind};
use mimq_core::heads::{TaskId, TaskSpec};
use mimq_core::model::{finetune_forward, image_tensor, init_store};
use mimq_core::params::LoadPolicy;
use mimq_core::train::{finetune, pretrain, scene_config, scene_kind, MetricsLog};
use mimq_core::verify::{run_suite, Fault};
use mimq_core::Error;

use manifest::{sidecar, RunManifest};

#[derive(Parser)]
#[command(name = "mimq", version, about = "Masked-image pre-training with query decoding on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<Config, Error> {
        match &self.config {
            Some(p) => Config::load(p),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Masked-patch reconstruction pre-training.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint path; metrics and manifest are written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tuning on one task, or jointly on a comma list of segmentation tasks.
    Finetune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        task: String,
        /// Pre-trained checkpoint, or `none`.
        #[arg(long, default_value = "none")]
        init: String,
        #[arg(long, default_value = "full")]
        load_policy: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data_frac: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Runs one ablation grid and writes a summary table.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        /// mask-strategy, mask-ratio, load-policy or decoder-depth.
        #[arg(long)]
        what: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient checks, matching and formula oracles, masking invariants
    /// and the query identity at initialisation.
    Verify {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory for the run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Writes scenes with label sidecars, or per-layer attention maps.
    Dump {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, conflicts_with = "attn", required_unless_present = "attn")]
        scenes: Option<usize>,
        /// Fine-tuned checkpoint and the seed of the scene to decode.
        #[arg(long, num_args = 2, value_names = ["CKPT", "IMAGE_SEED"])]
        attn: Option<Vec<String>>,
        /// Seed of the scene stream for `--scenes`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Task(_) | Error::Scene(_) | Error::Mask(_) => 2,
            Error::NonFiniteGrad { .. } | Error::NonFiniteLoss { .. } => 3,
            Error::Checkpoint(_) | Error::PolicyMissing { .. } | Error::ParamShape { .. } | Error::MissingParam(_) => 4,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 1, message: format!("{}: {e}", path.display()) }
}

type Outcome = Result<(), Failure>;

/// Runs `body`, then records outputs, timing and status in the manifest at
/// `manifest_path` (if any) whether or not the run succeeded.
fn with_manifest(
    cfg: &Config,
    manifest_path: Option<PathBuf>,
    body: impl FnOnce(&mut RunManifest) -> Outcome,
) -> Outcome {
    let start = Instant::now();
    let mut m = RunManifest::new(cfg);
    let res = body(&mut m);
    m.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Err(f) = &res {
        m.exit_code = f.code;
        m.error = Some(f.message.clone());
    }
    if let Some(path) = manifest_path {
        let written = m.write(&path).map_err(|e| io_failure(&path, e));
        res?;
        written?;
        return Ok(());
    }
    res
}

fn print_metrics(metrics: &[EvalResult]) {
    for r in metrics {
        println!("{} {} {:.4}", r.task, r.metric, r.value);
    }
}

fn cmd_pretrain(config: &ConfigArg, out: &Path, seed: Option<u64>, steps: Option<usize>) -> Outcome {
    let mut cfg = config.load()?;
    if let Some(s) = seed {
        cfg.pretrain.seed = s;
    }
    if let Some(n) = steps {
        cfg.pretrain.optim.steps = n;
    }
    let metrics = sidecar(out, "metrics.csv");
    with_manifest(&cfg.clone(), Some(sidecar(out, "manifest.json")), |m| {
        let res = pretrain(&cfg, &mut MetricsLog::to_file(metrics.clone())?);
        m.output(&metrics);
        let res = res?;
        res.checkpoint.save(out)?;
        m.output(out);
        if let Some(v) = res.final_loss(cfg.pretrain.log_every) {
            m.final_metrics.push(EvalResult::new("pretrain", "recon_mse", v));
        }
        print_metrics(&m.final_metrics);
        Ok(())
    })
}

fn parse_tasks(list: &str) -> Result<Vec<TaskId>, Error> {
    list.split(',').map(|t| t.trim().parse()).collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    config: &ConfigArg,
    task: &str,
    init: &str,
    load_policy: &str,
    out: &Path,
    data_frac: Option<f64>,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Outcome {
    let mut cfg = config.load()?;
    if let Some(f) = data_frac {
        cfg.finetune.data_frac = f;
    }
    if let Some(s) = seed {
        cfg.finetune.seed = s;
    }
    if let Some(n) = steps {
        cfg.finetune.optim.steps = n;
    }
    cfg.validate()?;
    let tasks = parse_tasks(task)?;
    let policy: LoadPolicy = load_policy.parse()?;
    let metrics = sidecar(out, "metrics.csv");
    with_manifest(&cfg.clone(), Some(sidecar(out, "manifest.json")), |m| {
        let ckpt = match init {
            "none" => None,
            path => Some(Checkpoint::load(Path::new(path))?),
        };
        let res = finetune(&cfg, &tasks, ckpt.as_ref(), policy, &mut MetricsLog::to_file(metrics.clone())?);
        m.output(&metrics);
        let res = res?;
        res.checkpoint.save(out)?;
        m.output(out);
        m.final_metrics = res.final_metrics;
        print_metrics(&m.final_metrics);
        Ok(())
    })
}

fn cmd_ablate(config: &ConfigArg, what: &str, out: &Path) -> Outcome {
    let cfg = config.load()?;
    let what: Ablation = what.parse()?;
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    with_manifest(&cfg, Some(out.join("manifest.json")), |m| {
        let res = run_ablation(&cfg, what, out);
        if let Ok(entries) = std::fs::read_dir(out) {
            let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            paths.iter().filter(|p| !p.ends_with("manifest.json")).for_each(|p| m.output(p));
        }
        for row in res? {
            m.final_metrics.push(EvalResult::new(&row.arm, "semseg_mIoU", row.miou));
            if let Some(v) = row.pretrain_loss {
                m.final_metrics.push(EvalResult::new(&row.arm, "pretrain_recon_mse", v));
            }
        }
        let summary = std::fs::read_to_string(out.join("summary.csv")).map_err(|e| io_failure(out, e))?;
        print!("{summary}");
        Ok(())
    })
}

fn cmd_verify(config: &ConfigArg, out: Option<&Path>, fault: Option<&str>) -> Outcome {
    let cfg = config.load()?;
    let fault: Option<Fault> = fault.map(str::parse).transpose()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    with_manifest(&cfg, out.map(|d| d.join("manifest.json")), |_| {
        let results = run_suite(&cfg, fault)?;
        for r in &results {
            println!("{r}");
        }
        let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
        if failed.is_empty() {
            println!("all {} checks passed", results.len());
            Ok(())
        } else {
            Err(Failure {
                code: 1,
                message: format!("failed checks: {}", failed.join(", ")),
            })
        }
    })
}

fn dump_scenes(cfg: &Config, n: usize, seed: u64, out: &Path, m: &mut RunManifest) -> Outcome {
    let sc = scene_config(cfg, SceneKind::Shapes);
    for i in 0..n {
        let s = scene_seed(seed, i as u64);
        let stem = format!("scene_{i:03}");
        dump_scene(out, &stem, s, &gen_scene(s, &sc)?)?;
        m.output(&out.join(format!("{stem}.ppm")));
        m.output(&out.join(format!("{stem}.json")));
    }
    println!("wrote {n} scenes to {}", out.display());
    Ok(())
}

/// Checks that `ckpt` holds every parameter `cfg` and `task` need, with
/// matching shapes.
fn check_inventory(cfg: &Config, task: &TaskSpec, ckpt: &Checkpoint) -> Result<(), Error> {
    let want = init_store(&cfg.model, std::slice::from_ref(task), 0);
    for (name, e) in want.iter() {
        let found = ckpt.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if found.shape != e.shape {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: e.shape.clone(),
                found: found.shape.clone(),
            });
        }
    }
    Ok(())
}

fn dump_attention(cfg: &Config, ckpt_path: &str, image_seed: &str, out: &Path, m: &mut RunManifest) -> Outcome {
    let image_seed: u64 = image_seed.parse().map_err(|_| usage(format!("bad image seed `{image_seed}`")))?;
    let ckpt = Checkpoint::load(Path::new(ckpt_path))?;
    let first = ckpt.meta.task.split('+').next().unwrap_or_default();
    let task_id: TaskId = first.parse()?;
    if task_id == TaskId::Pretrain {
        return Err(Failure {
            code: 4,
            message: "attention dumps need a fine-tuned checkpoint".into(),
        });
    }
    let task = TaskSpec::new(task_id, cfg);
    check_inventory(cfg, &task, &ckpt)?;
    let scene = gen_scene(image_seed, &scene_config(cfg, scene_kind(task_id)))?;
    let p = ckpt.params.bind(false);
    let mut trace = Vec::new();
    finetune_forward(&p, &cfg.model, &task, &image_tensor(&scene)?, Some(&mut trace))?;
    let mut csv = String::from("layer,level,query,cell,weight\n");
    for t in &trace {
        let cells = t.cells.len();
        let queries = t.weights.len() / cells.max(1);
        let mut map = vec![0.0f32; t.grid_h * t.grid_w];
        for q in 0..queries {
            for (k, &cell) in t.cells.iter().enumerate() {
                let w = t.weights[q * cells + k];
                map[cell] += w / queries as f32;
                writeln!(csv, "{},{},{q},{cell},{w}", t.layer, t.level).expect("string write");
            }
        }
        let hi = map.iter().copied().fold(0.0f32, f32::max);
        let path = out.join(format!("attn_layer{}_level{}.pgm", t.layer, t.level));
        write_atomic(&path, &pgm_bytes(t.grid_w, t.grid_h, &map, 0.0, hi))?;
        m.output(&path);
    }
    let path = out.join("attention.csv");
    write_atomic(&path, csv.as_bytes())?;
    m.output(&path);
    println!("wrote {} attention maps to {}", trace.len(), out.display());
    Ok(())
}

fn cmd_dump(config: &ConfigArg, scenes: Option<usize>, attn: Option<&[String]>, seed: u64, out: &Path) -> Outcome {
    let cfg = config.load()?;
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    with_manifest(&cfg, Some(out.join("manifest.json")), |m| match (scenes, attn) {
        (Some(n), None) => dump_scenes(&cfg, n, seed, out, m),
        (None, Some([ckpt, image_seed])) => dump_attention(&cfg, ckpt, image_seed, out, m),
        _ => Err(usage("give exactly one of --scenes N or --attn CKPT IMAGE_SEED")),
    })
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Pretrain { config, out, seed, steps } => cmd_pretrain(config, out, *seed, *steps),
        Command::Finetune {
            config,
            task,
            init,
            load_policy,
            out,
            data_frac,
            seed,
            steps,
        } => cmd_finetune(config, task, init, load_policy, out, *data_frac, *seed, *steps),
        Command::Ablate { config, what, out } => cmd_ablate(config, what, out),
        Command::Verify { config, out, inject_fault } => cmd_verify(config, out.as_deref(), inject_fault.as_deref()),
        Command::Dump {
            config,
            scenes,
            attn,
            seed,
            out,
        } => cmd_dump(config, *scenes, attn.as_deref(), *seed, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
