//! Pre-training and fine-tuning loops, the scene streams that feed them and
//! the metrics log.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{Config, OptimConfig};
use crate::data::metrics::EvalResult;
use crate::data::{derive_labels, gen_scene, scene_seed, Scene, SceneConfig, SceneKind};
use crate::error::{Error, Result};
use crate::heads::{TaskId, TaskSpec};
use crate::masking::make_mask;
use crate::model::{evaluate, finetune_forward, image_tensor, init_store, pretrain_loss, task_loss};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::params::{apply_policy, LoadPolicy, ParamStore, Params};

pub const METRICS_HEADER: &str = "step,phase,task,metric,value";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub phase: &'static str,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.phase, self.task, self.metric, self.value)
    }
}

/// Metric rows kept in memory and, when a path is set, appended to a CSV
/// one logging interval at a time.
#[derive(Debug, Default)]
pub struct MetricsLog {
    path: Option<PathBuf>,
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    /// Creates (truncating) the CSV at `path` with its header.
    pub fn to_file(path: PathBuf) -> Result<Self> {
        std::fs::write(&path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
        Ok(MetricsLog {
            path: Some(path),
            rows: Vec::new(),
        })
    }

    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends `rows` with a single write.
    pub fn append(&mut self, rows: Vec<MetricRow>) -> Result<()> {
        if let Some(path) = &self.path {
            let chunk: String = rows.iter().map(|r| r.csv() + "\n").collect();
            let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
            f.write_all(chunk.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        self.rows.extend(rows);
        Ok(())
    }

    /// `(step, value)` series of one eval metric.
    pub fn series(&self, task: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.phase == "eval" && r.task == task && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }
}

pub fn scene_config(cfg: &Config, kind: SceneKind) -> SceneConfig {
    SceneConfig {
        size: cfg.model.image_size,
        max_instances: cfg.data.max_instances,
        d_min: cfg.data.d_min,
        d_max: cfg.data.d_max,
        kind,
    }
}

/// Pose runs on single-figure scenes, everything else on shape scenes.
pub fn scene_kind(task: TaskId) -> SceneKind {
    if task == TaskId::Pose {
        SceneKind::Figure
    } else {
        SceneKind::Shapes
    }
}

/// Seeds of the fine-tuning pool after capping to `data_frac`.
pub fn pool_seeds(cfg: &Config) -> Vec<u64> {
    let n = pool_len(cfg.data.pool_size, cfg.finetune.data_frac);
    (0..n as u64).map(|j| scene_seed(cfg.data.pool_seed, j)).collect()
}

/// `round(size·frac)`, at least one scene.
pub fn pool_len(size: usize, frac: f64) -> usize {
    ((size as f64 * frac).round() as usize).clamp(1, size.max(1))
}

/// Cycles through a pool in a fresh seeded order each pass.
pub struct PoolSampler {
    pool: Vec<u64>,
    seed: u64,
    pass: Option<u64>,
    order: Vec<usize>,
}

impl PoolSampler {
    pub fn new(pool: Vec<u64>, seed: u64) -> Self {
        PoolSampler {
            pool,
            seed,
            pass: None,
            order: Vec::new(),
        }
    }

    /// Scene seed of the `i`-th draw.
    pub fn get(&mut self, i: usize) -> u64 {
        let n = self.pool.len();
        let pass = (i / n) as u64;
        if self.pass != Some(pass) {
            self.order = (0..n).collect();
            self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(self.seed, pass)));
            self.pass = Some(pass);
        }
        self.pool[self.order[i % n]]
    }
}

pub fn eval_scenes(cfg: &Config, kind: SceneKind) -> Result<Vec<Scene>> {
    let sc = scene_config(cfg, kind);
    (0..cfg.data.eval_scenes as u64)
        .map(|j| gen_scene(scene_seed(cfg.data.eval_seed, j), &sc))
        .collect()
}

fn collect_grads(p: &Params) -> BTreeMap<String, Vec<f32>> {
    p.iter()
        .filter_map(|(name, t)| t.grad().map(|g| (name.to_string(), g)))
        .collect()
}

fn check_optim(o: &OptimConfig, what: &str) -> Result<()> {
    if o.batch_size == 0 || !(o.lr > 0.0) || o.weight_decay < 0.0 {
        return Err(Error::Config(format!("{what}: batch size and lr must be positive")));
    }
    Ok(())
}

/// One optimizer step over per-sample graphs; gradients of `loss/B`
/// accumulate in the bound leaves in sample order.
fn train_step(
    store: &mut ParamStore,
    opt: &mut AdamW,
    o: &OptimConfig,
    step: usize,
    mut sample_loss: impl FnMut(&Params, usize) -> Result<mimq_tensor::Tensor>,
) -> Result<f64> {
    let p = store.bind(true);
    let b = o.batch_size;
    let mut total = 0.0;
    for i in 0..b {
        let loss = sample_loss(&p, i)?;
        let v = loss.item() as f64;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        total += v;
        loss.scale(1.0 / b as f64).backward()?;
    }
    let lr = lr_at(step, o.steps, o.warmup_steps, o.lr);
    opt.step(store, &collect_grads(&p), lr, o.weight_decay)?;
    Ok(total / b as f64)
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
}

impl PretrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean over the last `window` steps.
    pub fn final_loss(&self, window: usize) -> Option<f64> {
        let w = window.clamp(1, self.losses.len().max(1));
        let tail = &self.losses[self.losses.len().saturating_sub(w)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Masked-image pre-training from a fresh initialisation.
pub fn pretrain(cfg: &Config, log: &mut MetricsLog) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let pc = &cfg.pretrain;
    let o = &pc.optim;
    check_optim(o, "pretrain")?;
    let task = TaskSpec::new(TaskId::Pretrain, cfg);
    let mut store = init_store(&cfg.model, std::slice::from_ref(&task), pc.seed);
    let mut opt = AdamW::new(AdamWConfig::default());
    let sc = scene_config(cfg, SceneKind::Shapes);
    let grid = cfg.model.encoder.grid(cfg.model.image_size);
    let mut losses = Vec::with_capacity(o.steps);
    let mut pending = Vec::new();
    for step in 0..o.steps {
        let loss = train_step(&mut store, &mut opt, o, step, |p, i| {
            let k = (step * o.batch_size + i) as u64;
            let scene = gen_scene(scene_seed(pc.seed, 2 * k), &sc)?;
            let plan = make_mask(pc.mask_strategy, pc.mask_ratio, grid, grid, scene_seed(pc.seed, 2 * k + 1))?;
            pretrain_loss(p, &cfg.model, &task, &image_tensor(&scene)?, &plan)
        })?;
        losses.push(loss);
        pending.push(MetricRow {
            step: step + 1,
            phase: "train",
            task: "pretrain".into(),
            metric: "recon_mse".into(),
            value: loss,
        });
        if (step + 1) % pc.log_every.max(1) == 0 || step + 1 == o.steps {
            log.append(std::mem::take(&mut pending))?;
        }
    }
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            meta: CheckpointMeta {
                task: "pretrain".into(),
                step: o.steps,
                config_hash: cfg.hash(),
                rng: pc.seed,
            },
            params: store,
        },
        losses,
    })
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    /// Parameters copied from the initial checkpoint.
    pub loaded: Vec<String>,
    /// Task trained at each step.
    pub schedule: Vec<TaskId>,
    /// Metrics after the last step, per task.
    pub final_metrics: Vec<EvalResult>,
}

/// Task trained at each of `steps` steps: round robin over `tasks`.
pub fn task_schedule(tasks: &[TaskId], steps: usize) -> Vec<TaskId> {
    (0..steps).map(|s| tasks[s % tasks.len()]).collect()
}

fn check_tasks(tasks: &[TaskId]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Task("no fine-tuning task given".into()));
    }
    if let Some(t) = tasks.iter().find(|t| **t == TaskId::Pretrain) {
        return Err(Error::Task(format!("`{}` is not a fine-tuning task", t.name())));
    }
    let mut seen = tasks.to_vec();
    seen.sort();
    seen.dedup();
    if seen.len() != tasks.len() {
        return Err(Error::Task("duplicate task in list".into()));
    }
    if tasks.len() > 1 {
        if let Some(t) = tasks.iter().find(|t| !t.is_segmentation()) {
            return Err(Error::Task(format!(
                "joint training covers segmentation tasks only, got `{}`",
                t.name()
            )));
        }
    }
    Ok(())
}

/// Fine-tunes one head per task on a shared trunk. Under `policy` the
/// selected parameters come from `init`; everything else, and every head,
/// is fresh. With `LoadPolicy::None`, `init` is ignored.
pub fn finetune(
    cfg: &Config,
    tasks: &[TaskId],
    init: Option<&Checkpoint>,
    policy: LoadPolicy,
    log: &mut MetricsLog,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    check_tasks(tasks)?;
    let fc = &cfg.finetune;
    let o = &fc.optim;
    check_optim(o, "finetune")?;
    let specs: Vec<TaskSpec> = tasks.iter().map(|&t| TaskSpec::new(t, cfg)).collect();
    let mut store = init_store(&cfg.model, &specs, fc.seed);
    let loaded = match (policy, init) {
        (LoadPolicy::None, _) => Vec::new(),
        (_, Some(ck)) => apply_policy(&mut store, &ck.params, policy)?,
        (_, None) => {
            return Err(Error::PolicyMissing {
                policy: policy.name().into(),
                missing: store.names().filter(|n| policy.selects(n)).map(String::from).collect(),
            })
        }
    };
    let schedule = task_schedule(tasks, o.steps);
    let mut samplers: Vec<PoolSampler> = tasks
        .iter()
        .map(|&t| PoolSampler::new(pool_seeds(cfg), scene_seed(fc.seed, 100 + t as u64)))
        .collect();
    let mut drawn = vec![0usize; tasks.len()];
    let evals: Vec<Vec<Scene>> = tasks.iter().map(|&t| eval_scenes(cfg, scene_kind(t))).collect::<Result<_>>()?;
    let factor = cfg.model.encoder.patch_size;
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut pending = Vec::new();
    let mut final_metrics = Vec::new();
    for (step, &task) in schedule.iter().enumerate() {
        let ti = tasks.iter().position(|&t| t == task).expect("scheduled task is listed");
        let spec = &specs[ti];
        let sc = scene_config(cfg, scene_kind(task));
        let base = drawn[ti];
        let loss = train_step(&mut store, &mut opt, o, step, |p, i| {
            let scene = gen_scene(samplers[ti].get(base + i), &sc)?;
            let labels = derive_labels(&scene, task, factor)?;
            let fwd = finetune_forward(p, &cfg.model, spec, &image_tensor(&scene)?, None)?;
            task_loss(spec, &fwd, &labels)
        })?;
        drawn[ti] += o.batch_size;
        pending.push(MetricRow {
            step: step + 1,
            phase: "train",
            task: task.name().into(),
            metric: "loss".into(),
            value: loss,
        });
        let last = step + 1 == o.steps;
        if (step + 1) % fc.eval_every.max(1) == 0 || last {
            let mut now = Vec::new();
            for (spec, scenes) in specs.iter().zip(&evals) {
                for r in evaluate(&store, cfg, spec, scenes)? {
                    pending.push(MetricRow {
                        step: step + 1,
                        phase: "eval",
                        task: r.task.clone(),
                        metric: r.metric.clone(),
                        value: r.value,
                    });
                    now.push(r);
                }
            }
            log.append(std::mem::take(&mut pending))?;
            if last {
                final_metrics = now;
            }
        }
    }
    if o.steps == 0 {
        for (spec, scenes) in specs.iter().zip(&evals) {
            final_metrics.extend(evaluate(&store, cfg, spec, scenes)?);
        }
    }
    let names: Vec<&str> = tasks.iter().map(|t| t.name()).collect();
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint {
            meta: CheckpointMeta {
                task: names.join("+"),
                step: o.steps,
                config_hash: cfg.hash(),
                rng: fc.seed,
            },
            params: store,
        },
        loaded,
        schedule,
        final_metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// A configuration small enough for unit tests.
    fn tiny() -> Config {
        let mut c = Config::default();
        c.pretrain.optim.steps = 2;
        c.pretrain.optim.batch_size = 2;
        c.pretrain.optim.warmup_steps = 1;
        c.pretrain.log_every = 1;
        c.finetune.optim.steps = 2;
        c.finetune.optim.batch_size = 1;
        c.finetune.optim.warmup_steps = 1;
        c.finetune.eval_every = 1;
        c.data.eval_scenes = 2;
        c
    }

    #[test]
    fn zero_step_pretrain_is_the_initialisation() {
        let mut c = tiny();
        c.pretrain.optim.steps = 0;
        let out = pretrain(&c, &mut MetricsLog::in_memory()).unwrap();
        let fresh = init_store(&c.model, &[TaskSpec::new(TaskId::Pretrain, &c)], c.pretrain.seed);
        assert!(out.checkpoint.params.bit_equal(&fresh));
    }

    #[test]
    fn pretrain_is_deterministic_and_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let path = dir.path().join("m.csv");
        let a = pretrain(&c, &mut MetricsLog::to_file(path.clone()).unwrap()).unwrap();
        let b = pretrain(&c, &mut MetricsLog::in_memory()).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,train,pretrain,recon_mse,"));
    }

    #[test]
    fn policy_none_equals_no_init() {
        let mut c = tiny();
        c.finetune.optim.steps = 0;
        let pre = pretrain(&tiny(), &mut MetricsLog::in_memory()).unwrap();
        let a = finetune(&c, &[TaskId::Semseg], Some(&pre.checkpoint), LoadPolicy::None, &mut MetricsLog::in_memory()).unwrap();
        let b = finetune(&c, &[TaskId::Semseg], None, LoadPolicy::None, &mut MetricsLog::in_memory()).unwrap();
        assert!(a.checkpoint.params.bit_equal(&b.checkpoint.params));
        let full = finetune(&c, &[TaskId::Semseg], Some(&pre.checkpoint), LoadPolicy::Full, &mut MetricsLog::in_memory()).unwrap();
        let bb = finetune(&c, &[TaskId::Semseg], Some(&pre.checkpoint), LoadPolicy::Backbone, &mut MetricsLog::in_memory()).unwrap();
        assert!(full.loaded.len() > bb.loaded.len());
        assert!(bb.loaded.iter().all(|n| full.loaded.contains(n)));
        assert_eq!(
            full.checkpoint.params.get("query.cls"),
            pre.checkpoint.params.get("query.cls")
        );
    }

    #[test]
    fn policy_without_checkpoint_is_an_error() {
        let r = finetune(&tiny(), &[TaskId::Semseg], None, LoadPolicy::Backbone, &mut MetricsLog::in_memory());
        assert!(matches!(r, Err(Error::PolicyMissing { .. })));
    }

    #[test]
    fn checkpoint_missing_names_is_rejected() {
        let mut c = tiny();
        c.finetune.optim.steps = 0;
        let mut pre = pretrain(&{ let mut t = tiny(); t.pretrain.optim.steps = 0; t }, &mut MetricsLog::in_memory()).unwrap();
        let mut thin = ParamStore::new();
        for (n, e) in pre.checkpoint.params.iter().filter(|(n, _)| !n.starts_with("fpn.")) {
            thin.insert(n, e.shape.clone(), e.data.clone());
        }
        pre.checkpoint.params = thin;
        assert!(finetune(&c, &[TaskId::Semseg], Some(&pre.checkpoint), LoadPolicy::Backbone, &mut MetricsLog::in_memory()).is_ok());
        let err = finetune(&c, &[TaskId::Semseg], Some(&pre.checkpoint), LoadPolicy::BackboneFpn, &mut MetricsLog::in_memory())
            .unwrap_err();
        assert!(matches!(err, Error::PolicyMissing { ref missing, .. } if missing.iter().all(|n| n.starts_with("fpn."))));
    }

    #[test]
    fn joint_tasks_must_be_segmentation() {
        assert!(check_tasks(&[TaskId::Semseg, TaskId::Depth]).is_err());
        assert!(check_tasks(&[TaskId::Semseg, TaskId::Semseg]).is_err());
        assert!(check_tasks(&[TaskId::Pretrain]).is_err());
        assert!(check_tasks(&[TaskId::Depth]).is_ok());
        assert!(check_tasks(&[TaskId::Semseg, TaskId::Instseg, TaskId::Panoptic]).is_ok());
    }

    #[test]
    fn joint_run_logs_every_task() {
        let mut c = tiny();
        c.finetune.optim.steps = 3;
        let mut log = MetricsLog::in_memory();
        let tasks = [TaskId::Semseg, TaskId::Instseg, TaskId::Panoptic];
        let out = finetune(&c, &tasks, None, LoadPolicy::None, &mut log).unwrap();
        assert_eq!(out.schedule, tasks.to_vec());
        assert_eq!(out.final_metrics.len(), 3);
        for t in tasks {
            assert_eq!(log.series(t.name(), t.metric()).len(), 3);
        }
        assert_eq!(out.checkpoint.meta.task, "semseg+instseg+panoptic");
    }

    #[test]
    fn even_split_for_two_tasks() {
        let s = task_schedule(&[TaskId::Semseg, TaskId::Panoptic], 90);
        assert_eq!(s.iter().filter(|&&t| t == TaskId::Semseg).count(), 45);
    }

    #[test]
    fn pool_is_capped_and_cycled() {
        let mut c = Config::default();
        c.finetune.data_frac = 0.1;
        let pool = pool_seeds(&c);
        assert_eq!(pool.len(), 205);
        let mut s = PoolSampler::new(pool.clone(), 0);
        let first: Vec<u64> = (0..205).map(|i| s.get(i)).collect();
        let mut sorted = first.clone();
        sorted.sort();
        let mut want = pool.clone();
        want.sort();
        assert_eq!(sorted, want);
        let second: Vec<u64> = (205..410).map(|i| s.get(i)).collect();
        assert_ne!(first, second);
        assert_eq!(pool_len(10, 0.0), 1);
    }

    proptest! {
        #[test]
        fn round_robin_counts_differ_by_at_most_one(k in 2usize..4, steps in 0usize..200) {
            let tasks = &[TaskId::Semseg, TaskId::Instseg, TaskId::Panoptic][..k];
            let s = task_schedule(tasks, steps);
            let mut counts = vec![0usize; k];
            for t in &s {
                counts[tasks.iter().position(|x| x == t).unwrap()] += 1;
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
        }
    }
}
