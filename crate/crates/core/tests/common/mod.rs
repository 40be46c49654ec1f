#![allow(dead_code)]

use std::path::Path;

use convrec::config::RunConfig;
use convrec::pipeline;

/// A scaled-down synthetic benchmark that trains in seconds.
pub fn small(dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.run.output_dir = dir.to_string_lossy().into_owned();
    for (k, v) in [
        ("data.users", "120"),
        ("data.items", "80"),
        ("data.attributes", "20"),
        ("data.topic_size", "5"),
        ("fm.dim", "16"),
        ("fm.epochs", "8"),
        ("active.episodes", "60"),
        ("negative.episodes", "60"),
        ("policy.train_sessions", "150"),
        ("policy.batch_size", "32"),
        ("eval.max_sessions", "100"),
        ("eval.variants", "full,no_samplers,abs_greedy,max_entropy"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

pub fn through_fm(cfg: &RunConfig) {
    pipeline::gen_data(cfg).unwrap();
    pipeline::pretrain_fm(cfg).unwrap();
}

pub fn through_policy(cfg: &RunConfig) {
    through_fm(cfg);
    pipeline::pretrain_active(cfg).unwrap();
    pipeline::pretrain_negative(cfg).unwrap();
    pipeline::train_policy(cfg).unwrap();
}
