#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SYNTHETIC: &str = r#"
seed = 3

[data]
source = "synthetic"

[data.train]
kind = "two_gaussians"
dimension = 4
samples = 48
seed = 1
mu = 1.0

[data.test]
kind = "two_gaussians"
dimension = 4
samples = 12
seed = 2
mu = 1.0

[model]
init = "GN"

[model.activation]
kind = "softplus"
beta = 2.0
second_order_mode = "exact"

[model.architecture]
kind = "mlp"
hidden = [6]

[[train]]
objective = "nat"
epochs = 2
batch_size = 16

[train.optimizer]
lr = 0.02

[train.attack]
norm = "inf"
epsilon = 0.5
step_size = 0.1
iterations = 2
restarts = 1

[train.attack.dissimilarity]
kind = "pcl"

[train.attack.attribution]
method = "IG"
steps = 4

[[train]]
objective = "aat"
lambda = 0.5
epochs = 1
batch_size = 16

[train.optimizer]
lr = 0.01

[train.attack]
norm = "inf"
epsilon = 0.5
step_size = 0.2
iterations = 2
restarts = 1

[train.attack.dissimilarity]
kind = "pcl"

[train.attack.attribution]
method = "IG"
steps = 4

[eval]
top_k = 2
ig_steps = 16

[eval.ifia]
norm = "inf"
epsilon = 0.5
step_size = 0.1
iterations = 3
restarts = 2

[eval.ifia.dissimilarity]
kind = "sum_top_k"
k = 2

[eval.ifia.attribution]
method = "IG"
steps = 8

[eval.pgd]
norm = "inf"
epsilon = 0.5
step_size = 0.05
iterations = 10
restarts = 2

[eval.pgd.dissimilarity]
kind = "pcl"

[attack]
method = "ifia"

[attack.config]
norm = "inf"
epsilon = 0.5
step_size = 0.1
iterations = 3
restarts = 2

[attack.config.dissimilarity]
kind = "sum_top_k"
k = 2

[attack.config.attribution]
method = "IG"
steps = 8

[explain.attribution]
method = "IG"
steps = 32

[sweep]
seeds = [0, 1]

[sweep.grid]
parameter = "lambda"
values = [0.0, 0.5]
"#;

pub fn far(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_far")).args(args).env("RUST_LOG", "warn").output().expect("far runs")
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

pub fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn run_ok(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = far(&args);
    assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
    files(out)
}
