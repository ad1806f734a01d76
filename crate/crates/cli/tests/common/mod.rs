#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use atm_cli::RunConfig;

/// Writes `atm.toml` into `dir` and loads it.
pub fn config(dir: &Path, text: &str) -> RunConfig {
    let path = dir.join("atm.toml");
    fs::write(&path, text).unwrap();
    RunConfig::load(&path).unwrap()
}

/// Tiny model on synthetic weights and `count` synthetic images.
pub fn tiny_toml(out: &str, count: usize, seed: u64, extra: &str) -> String {
    format!(
        r#"batch_size = 2
output = "{out}"
weights = "synthetic:{seed}"

[model]
preset = "tiny"

[schedule]
kind = "layer_dependent_threshold"
alpha = 0.99
beta = 0.04
theta_min = 0.9

[inputs]
synthetic = {{ count = {count}, seed = {seed} }}

{extra}
"#
    )
}

/// Relative path to file contents, for every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
