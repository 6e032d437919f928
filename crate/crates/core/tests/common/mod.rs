#![allow(dead_code)]

use std::path::PathBuf;

use qlan::config::ExperimentConfig;
use qlan::timetag::{Record, TimetagStream};

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

pub fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).expect("shipped config loads")
}

pub fn stream_from_bins(node: &str, resolution_ps: u32, mut bins: Vec<u64>) -> TimetagStream {
    bins.sort_unstable();
    let mut s = TimetagStream::new(node, resolution_ps);
    s.records = bins
        .into_iter()
        .map(|global_bin| Record {
            global_bin,
            detector_channel: 0,
        })
        .collect();
    s
}

/// Maximum bipartite matching by augmenting paths (Kuhn). An edge joins
/// `a[i]` and `b[j]` when `-w/2 <= (b - a - delay)·res < w/2`, evaluated
/// directly in picoseconds.
pub fn kuhn_coincidences(a: &[u64], b: &[u64], delay_bins: i64, window_ns: f64, resolution_ps: u32) -> u64 {
    let half_ps = window_ns * 1e3 / 2.0;
    let res = f64::from(resolution_ps);
    let adj: Vec<Vec<usize>> = a
        .iter()
        .map(|&ta| {
            (0..b.len())
                .filter(|&j| {
                    let dt = (b[j] as f64 - ta as f64 - delay_bins as f64) * res;
                    -half_ps <= dt && dt < half_ps
                })
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; b.len()];
    let mut matched = 0;
    for i in 0..a.len() {
        let mut seen = vec![false; b.len()];
        if augment(i, &adj, &mut owner, &mut seen) {
            matched += 1;
        }
    }
    matched
}

fn augment(i: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &j in &adj[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        if owner[j].is_none_or(|k| augment(k, adj, owner, seen)) {
            owner[j] = Some(i);
            return true;
        }
    }
    false
}
