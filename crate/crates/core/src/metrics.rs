//! Click-through rate and single-relevant-item ranking metrics.

use std::io::Write;

use crate::error::{invalid, Result};

pub const DEFAULT_K: usize = 10;

/// Episode return over the best achievable return.
pub fn ctr(episode_return: f64, episode_len: usize, r_max: f64) -> Result<f64> {
    if episode_len == 0 {
        return Err(invalid("CTR of an empty episode"));
    }
    if r_max <= 0.0 {
        return Err(invalid(format!("r_max must be positive, got {r_max}")));
    }
    Ok(episode_return / (episode_len as f64 * r_max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingExample {
    pub logits: Vec<f64>,
    pub target: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopK {
    pub k: usize,
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
}

/// 1-based rank of the target; equal logits are ordered by ascending id.
pub fn rank_of(logits: &[f64], target: usize) -> usize {
    let t = logits[target];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > t || (x == t && i < target))
        .count()
}

pub fn topk_metrics(examples: &[RankingExample], k: usize) -> Result<TopK> {
    if examples.is_empty() {
        return Err(invalid("ranking metrics need at least one example"));
    }
    if k == 0 {
        return Err(invalid("k must be positive"));
    }
    let mut hits = 0.0;
    let mut dcg = 0.0;
    for ex in examples {
        let n = ex.logits.len();
        if ex.target >= n {
            return Err(invalid(format!(
                "target {} outside catalog of {n}",
                ex.target
            )));
        }
        if k > n {
            return Err(invalid(format!("k = {k} exceeds catalog of {n}")));
        }
        let r = rank_of(&ex.logits, ex.target);
        if r <= k {
            hits += 1.0;
            dcg += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = examples.len() as f64;
    Ok(TopK {
        k,
        recall: hits / n,
        precision: hits / n / k as f64,
        ndcg: dcg / n,
    })
}

/// Writes `metric,k,value` rows; `k` is left empty for unranked metrics.
pub fn write_report<W: Write>(mut w: W, rows: &[(&str, Option<usize>, f64)]) -> Result<()> {
    writeln!(w, "metric,k,value")?;
    for (name, k, v) in rows {
        match k {
            Some(k) => writeln!(w, "{name},{k},{v}")?,
            None => writeln!(w, "{name},,{v}")?,
        }
    }
    w.flush()?;
    Ok(())
}
