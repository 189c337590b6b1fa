use mimq_core::checkpoint::Checkpoint;
use mimq_core::config::Config;
use mimq_core::heads::TaskId;
use mimq_core::params::LoadPolicy;
use mimq_core::train::{finetune, pretrain, MetricsLog};

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
fn saved_checkpoint_fine_tunes_like_the_in_memory_one() {
    let c = tiny();
    let pre = pretrain(&c, &mut MetricsLog::in_memory()).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.ckpt");
    pre.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();

    let a = finetune(&c, &[TaskId::Semseg], Some(&pre), LoadPolicy::Full, &mut MetricsLog::in_memory()).unwrap();
    let b = finetune(&c, &[TaskId::Semseg], Some(&loaded), LoadPolicy::Full, &mut MetricsLog::in_memory()).unwrap();
    assert!(a.checkpoint.params.bit_equal(&b.checkpoint.params));
    assert_eq!(a.final_metrics, b.final_metrics);
}

#[test]
fn loaded_names_follow_the_policy_and_grow_with_it() {
    let c = tiny();
    let pre = pretrain(&c, &mut MetricsLog::in_memory()).unwrap().checkpoint;
    let mut previous = 0;
    for policy in LoadPolicy::ALL {
        let out = finetune(&c, &[TaskId::Depth], Some(&pre), policy, &mut MetricsLog::in_memory()).unwrap();
        assert!(out.loaded.iter().all(|n| policy.selects(n)), "{policy}");
        assert!(out.loaded.iter().all(|n| !n.starts_with("head.")));
        for name in &out.loaded {
            let got = out.checkpoint.params.get(name).unwrap();
            assert_eq!(got.shape, pre.params.get(name).unwrap().shape);
        }
        assert!(policy == LoadPolicy::None || out.loaded.len() > previous);
        previous = out.loaded.len();
    }
}

#[test]
fn every_task_reports_finite_metrics_after_a_short_run() {
    let c = tiny();
    for task in [TaskId::Detect, TaskId::Instseg, TaskId::Panoptic, TaskId::Depth, TaskId::Pose] {
        let mut log = MetricsLog::in_memory();
        let out = finetune(&c, &[task], None, LoadPolicy::None, &mut log).unwrap();
        assert!(!out.final_metrics.is_empty());
        assert!(out.final_metrics.iter().all(|m| m.value.is_finite()), "{task:?}");
        assert_eq!(log.series(task.name(), task.metric()).len(), 2);
    }
}

#[test]
fn policy_without_checkpoint_is_refused_but_none_is_not() {
    let c = tiny();
    assert!(finetune(&c, &[TaskId::Semseg], None, LoadPolicy::Backbone, &mut MetricsLog::in_memory()).is_err());
    assert!(finetune(&c, &[TaskId::Semseg], None, LoadPolicy::None, &mut MetricsLog::in_memory()).is_ok());
}
