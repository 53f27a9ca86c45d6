#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use advdiff::pipeline::Manifest;

/// Small enough that a full run takes well under a second.
pub const SMALL: &str = "\
dataset.identities = 10
dataset.renders = 12
dataset.height = 16
dataset.width = 16
T = 20
t_s = 5
N_a = 3
denoiser.epochs = 2
embedders.epochs = 10
embedders.target_accuracy = 0.6
attack.sources = 6
ablation.sources = 4
eval.impostor_pairs = 200
";

pub fn small() -> Manifest {
    Manifest::parse(SMALL).unwrap()
}

pub fn small_with(overrides: &[&str]) -> Manifest {
    let mut m = small();
    m.apply_overrides(overrides).unwrap();
    m
}

/// Relative path → file bytes, for every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn mtimes(root: &Path) -> BTreeMap<PathBuf, std::time::SystemTime> {
    snapshot(root)
        .into_keys()
        .map(|rel| {
            let t = std::fs::metadata(root.join(&rel))
                .unwrap()
                .modified()
                .unwrap();
            (rel, t)
        })
        .collect()
}
