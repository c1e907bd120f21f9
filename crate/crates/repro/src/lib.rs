//! Helpers for comparing experiment outputs.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

/// Every file under `root`, keyed by its path relative to `root`.
pub fn read_tree(root: &Path) -> io::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root").to_path_buf();
                out.insert(rel, std::fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

/// Relative paths present in only one tree or with different bytes.
pub fn tree_differences(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Vec<PathBuf> {
    let mut keys: Vec<&PathBuf> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}

/// AUROC by counting every (positive, negative) pair, ties as one half.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice_wins, mut pos, mut neg) = (0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            neg += 1;
            continue;
        }
        pos += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if !lj {
                twice_wins += match scores[i].partial_cmp(&scores[j]).expect("no NaN") {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice_wins as f64 / (2 * pos * neg) as f64
}
