//! Multi-scale retention.
//!
//! Each head mixes tokens as `out_n = Σ_{m≤n} α^{n−m} (Q_n·K_mᵀ) V_m`, with
//! queries and keys rotated by their absolute position so that `Q_n·K_mᵀ`
//! only sees the offset `n − m`. Three evaluation orders are provided and
//! agree to rounding error:
//!
//! * recurrent: `Z_n = α Z_{n−1} + K_nᵀ V_n`, `out_n = Q_n Z_n` (O(d²) per token)
//! * parallel: `(Q Kᵀ ⊙ D) V` with `D[n][m] = α^{n−m}` for `n ≥ m`
//! * chunkwise: parallel inside segments of length `M`, recurrent across them
//!
//! Complex phases are carried as 2-D rotations of (even, odd) channel pairs.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Backend, Eager, Tensor};

pub const ROTATION_BASE: f64 = 10_000.0;
pub const GROUP_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RetentionMode {
    Recurrent,
    Parallel,
    #[default]
    Chunkwise,
}

impl std::str::FromStr for RetentionMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(Self::Recurrent),
            "parallel" => Ok(Self::Parallel),
            "chunkwise" => Ok(Self::Chunkwise),
            other => Err(invalid(format!("unknown retention mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for RetentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Recurrent => "recurrent",
            Self::Parallel => "parallel",
            Self::Chunkwise => "chunkwise",
        })
    }
}

/// Per-head decays `α_j = 1 − 2^(−5 − j)`.
pub fn alpha_schedule(heads: usize) -> Result<Vec<f64>> {
    if heads == 0 {
        return Err(invalid("head count must be at least 1"));
    }
    Ok((0..heads).map(|j| 1.0 - 2f64.powi(-5 - j as i32)).collect())
}

/// Rotation frequency per channel pair: `base^(−2j/d)`.
pub fn rotation_angles(head_dim: usize) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|j| ROTATION_BASE.powf(-2.0 * j as f64 / head_dim as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionConfig {
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub alphas: Vec<f64>,
    pub thetas: Vec<f64>,
}

impl RetentionConfig {
    pub fn new(hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(invalid(format!(
                "hidden size {hidden} must be divisible by head count {heads}"
            )));
        }
        let head_dim = hidden / heads;
        if !head_dim.is_multiple_of(2) {
            return Err(invalid(format!("per-head dim {head_dim} must be even")));
        }
        Ok(Self {
            hidden,
            heads,
            head_dim,
            alphas: alpha_schedule(heads)?,
            thetas: rotation_angles(head_dim),
        })
    }
}

/// `D[n][m] = α^(n−m)` for `n ≥ m`, else 0.
pub fn decay_mask(alpha: f64, len: usize) -> Tensor {
    let mut d = Tensor::zeros(&[len, len]);
    let data = d.data_mut();
    for n in 0..len {
        for m in 0..=n {
            data[n * len + m] = alpha.powi((n - m) as i32);
        }
    }
    d
}

/// Rotates each (even, odd) channel pair of row `r` by `(offset + r)·θ_j`.
pub fn rotate<B: Backend>(
    b: &mut B,
    x: &B::Value,
    offset: usize,
    thetas: &[f64],
) -> Result<B::Value> {
    rotate_at(b, x, thetas, |r| offset + r)
}

fn rotate_at<B: Backend>(
    b: &mut B,
    x: &B::Value,
    thetas: &[f64],
    position: impl Fn(usize) -> usize,
) -> Result<B::Value> {
    let (rows, cols) = {
        let v = b.value(x);
        (v.rows(), v.cols())
    };
    if cols != 2 * thetas.len() {
        return Err(invalid(format!(
            "rotation over {cols} channels needs {} angles, got {}",
            cols / 2,
            thetas.len()
        )));
    }
    if thetas.iter().all(|&t| t == 0.0) {
        return Ok(x.clone());
    }
    let mut cos = Tensor::zeros(&[rows, cols]);
    let mut sin = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let pos = position(r) as f64;
        for (j, &theta) in thetas.iter().enumerate() {
            let (s, c) = (pos * theta).sin_cos();
            let base = r * cols + 2 * j;
            cos.data_mut()[base] = c;
            cos.data_mut()[base + 1] = c;
            sin.data_mut()[base] = s;
            sin.data_mut()[base + 1] = s;
        }
    }
    // (x·P)[2j] = −x[2j+1], (x·P)[2j+1] = x[2j]
    let mut swap = Tensor::zeros(&[cols, cols]);
    for j in 0..thetas.len() {
        swap.data_mut()[(2 * j + 1) * cols + 2 * j] = -1.0;
        swap.data_mut()[(2 * j) * cols + 2 * j + 1] = 1.0;
    }
    let cos = b.constant(cos);
    let sin = b.constant(sin);
    let swap = b.constant(swap);
    let xc = b.mul(x, &cos)?;
    let xs = b.matmul(x, &swap)?;
    let xs = b.mul(&xs, &sin)?;
    b.add(&xc, &xs)
}

/// Projects hidden rows to one head's rotated queries and keys and plain values.
pub fn project_qkv<B: Backend>(
    b: &mut B,
    h: &B::Value,
    w_q: &B::Value,
    w_k: &B::Value,
    w_v: &B::Value,
    thetas: &[f64],
    offset: usize,
) -> Result<(B::Value, B::Value, B::Value)> {
    let q = b.matmul(h, w_q)?;
    let k = b.matmul(h, w_k)?;
    let v = b.matmul(h, w_v)?;
    let q = rotate(b, &q, offset, thetas)?;
    let k = rotate(b, &k, offset, thetas)?;
    Ok((q, k, v))
}

fn rows_of<B: Backend>(b: &B, x: &B::Value) -> usize {
    b.value(x).rows()
}

/// Token-by-token retention. `state` is the accumulator carried in from
/// earlier tokens (absent means zero history). Returns outputs and the
/// final accumulator.
pub fn retention_recurrent<B: Backend>(
    b: &mut B,
    q: &B::Value,
    k: &B::Value,
    v: &B::Value,
    alpha: f64,
    state: Option<&B::Value>,
) -> Result<(B::Value, B::Value)> {
    let n = rows_of(b, q);
    if n == 0 {
        return Err(invalid("retention over an empty sequence"));
    }
    let kt = b.transpose(k)?;
    let mut z = state.cloned();
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let ki = b.slice_cols(&kt, i, i + 1)?;
        let vi = b.slice_rows(v, i, i + 1)?;
        let kv = b.matmul(&ki, &vi)?;
        let zi = match &z {
            Some(prev) => {
                let decayed = b.scale(prev, alpha)?;
                b.add(&decayed, &kv)?
            }
            None => kv,
        };
        let qi = b.slice_rows(q, i, i + 1)?;
        outs.push(b.matmul(&qi, &zi)?);
        z = Some(zi);
    }
    let out = b.concat_rows(&outs)?;
    Ok((out, z.expect("non-empty sequence")))
}

/// Whole-sequence retention `(Q Kᵀ ⊙ D) V` assuming no prior history.
pub fn retention_parallel<B: Backend>(
    b: &mut B,
    q: &B::Value,
    k: &B::Value,
    v: &B::Value,
    alpha: f64,
) -> Result<B::Value> {
    let n = rows_of(b, q);
    let kt = b.transpose(k)?;
    let scores = b.matmul(q, &kt)?;
    let d = b.constant(decay_mask(alpha, n));
    let masked = b.mul(&scores, &d)?;
    b.matmul(&masked, v)
}

/// Segmented retention: parallel within each length-`seg_len` segment and a
/// recurrent accumulator between segments. The last segment may be short;
/// its true length is used in both decay exponents.
pub fn retention_chunkwise<B: Backend>(
    b: &mut B,
    q: &B::Value,
    k: &B::Value,
    v: &B::Value,
    alpha: f64,
    seg_len: usize,
    state: Option<&B::Value>,
) -> Result<(B::Value, B::Value)> {
    if seg_len == 0 {
        return Err(invalid("segment length must be at least 1"));
    }
    let n = rows_of(b, q);
    if n == 0 {
        return Err(invalid("retention over an empty sequence"));
    }
    let d = b.value(v).cols();
    let mut z = state.cloned();
    let mut outs = Vec::with_capacity(n.div_ceil(seg_len));
    let mut start = 0;
    while start < n {
        let end = (start + seg_len).min(n);
        let len = end - start;
        let qs = b.slice_rows(q, start, end)?;
        let ks = b.slice_rows(k, start, end)?;
        let vs = b.slice_rows(v, start, end)?;
        let inner = retention_parallel(b, &qs, &ks, &vs, alpha)?;

        let ks_t = b.transpose(&ks)?;
        let tail_decay = Tensor::from_parts(
            vec![len, d],
            (0..len)
                .flat_map(|i| std::iter::repeat_n(alpha.powi((len - i - 1) as i32), d))
                .collect(),
        );
        let tail_decay = b.constant(tail_decay);
        let vs_decayed = b.mul(&vs, &tail_decay)?;
        let kv = b.matmul(&ks_t, &vs_decayed)?;

        let (out, next) = match &z {
            Some(prev) => {
                let head_decay = Tensor::from_parts(
                    vec![len, d],
                    (0..len)
                        .flat_map(|i| std::iter::repeat_n(alpha.powi(i as i32 + 1), d))
                        .collect(),
                );
                let head_decay = b.constant(head_decay);
                let cross = b.matmul(&qs, prev)?;
                let cross = b.mul(&cross, &head_decay)?;
                let out = b.add(&inner, &cross)?;
                let carried = b.scale(prev, alpha.powi(len as i32))?;
                (out, b.add(&carried, &kv)?)
            }
            None => (inner, kv),
        };
        outs.push(out);
        z = Some(next);
        start = end;
    }
    let out = if outs.len() == 1 {
        outs.pop().expect("one segment")
    } else {
        b.concat_rows(&outs)?
    };
    Ok((out, z.expect("non-empty sequence")))
}

/// Retention over a fresh sequence in the chosen evaluation order.
pub fn retention<B: Backend>(
    b: &mut B,
    mode: RetentionMode,
    q: &B::Value,
    k: &B::Value,
    v: &B::Value,
    alpha: f64,
    seg_len: usize,
) -> Result<B::Value> {
    match mode {
        RetentionMode::Recurrent => Ok(retention_recurrent(b, q, k, v, alpha, None)?.0),
        RetentionMode::Parallel => retention_parallel(b, q, k, v, alpha),
        RetentionMode::Chunkwise => Ok(retention_chunkwise(b, q, k, v, alpha, seg_len, None)?.0),
    }
}

/// Weights of one multi-scale retention layer. Projections are
/// `hidden × hidden`; head `j` owns columns `j·d .. (j+1)·d` of `w_q`, `w_k`, `w_v`.
#[derive(Clone, Debug)]
pub struct MsrWeights<V> {
    pub w_q: V,
    pub w_k: V,
    pub w_v: V,
    pub w_p: V,
    pub w_o: V,
    pub gn_gain: V,
    pub gn_bias: V,
}

/// Group normalization of each row with one group per head, then affine.
pub fn group_norm<B: Backend>(
    b: &mut B,
    x: &B::Value,
    groups: usize,
    gain: &B::Value,
    bias: &B::Value,
    eps: f64,
) -> Result<B::Value> {
    let cols = b.value(x).cols();
    if groups == 0 || cols % groups != 0 {
        return Err(invalid(format!(
            "{cols} channels do not split into {groups} groups"
        )));
    }
    let w = cols / groups;
    let mut parts = Vec::with_capacity(groups);
    for g in 0..groups {
        let s = b.slice_cols(x, g * w, (g + 1) * w)?;
        parts.push(b.normalize_rows(&s, eps)?);
    }
    let n = if parts.len() == 1 {
        parts.pop().expect("one group")
    } else {
        b.concat_cols(&parts)?
    };
    let n = b.mul_row(&n, gain)?;
    b.add_row(&n, bias)
}

/// Positions restart every `period` rows when stacking independent sequences.
fn head_outputs<B: Backend>(
    b: &mut B,
    x: &B::Value,
    w: &MsrWeights<B::Value>,
    cfg: &RetentionConfig,
    offset: usize,
    period: Option<usize>,
    mut per_head: impl FnMut(&mut B, usize, &B::Value, &B::Value, &B::Value) -> Result<B::Value>,
) -> Result<B::Value> {
    let q_all = b.matmul(x, &w.w_q)?;
    let k_all = b.matmul(x, &w.w_k)?;
    let v_all = b.matmul(x, &w.w_v)?;
    let d = cfg.head_dim;
    let position = |r: usize| match period {
        Some(p) => r % p,
        None => offset + r,
    };
    let mut heads = Vec::with_capacity(cfg.heads);
    for j in 0..cfg.heads {
        let q = b.slice_cols(&q_all, j * d, (j + 1) * d)?;
        let k = b.slice_cols(&k_all, j * d, (j + 1) * d)?;
        let v = b.slice_cols(&v_all, j * d, (j + 1) * d)?;
        let q = rotate_at(b, &q, &cfg.thetas, position)?;
        let k = rotate_at(b, &k, &cfg.thetas, position)?;
        heads.push(per_head(b, j, &q, &k, &v)?);
    }
    if heads.len() == 1 {
        Ok(heads.pop().expect("one head"))
    } else {
        b.concat_cols(&heads)
    }
}

fn gate_and_project<B: Backend>(
    b: &mut B,
    x: &B::Value,
    heads: &B::Value,
    w: &MsrWeights<B::Value>,
    cfg: &RetentionConfig,
) -> Result<B::Value> {
    let normed = group_norm(b, heads, cfg.heads, &w.gn_gain, &w.gn_bias, GROUP_NORM_EPS)?;
    let xp = b.matmul(x, &w.w_p)?;
    let gate = b.sigmoid(&xp)?;
    let swish = b.mul(&xp, &gate)?;
    let gated = b.mul(&swish, &normed)?;
    b.matmul(&gated, &w.w_o)
}

/// `MSR(X) = [swish(X·W_P) ⊙ GN(Concat(head_1..head_h))]·W_O` over a fresh sequence.
pub fn msr<B: Backend>(
    b: &mut B,
    x: &B::Value,
    w: &MsrWeights<B::Value>,
    cfg: &RetentionConfig,
    mode: RetentionMode,
    seg_len: usize,
) -> Result<B::Value> {
    let heads = head_outputs(b, x, w, cfg, 0, None, |b, j, q, k, v| {
        retention(b, mode, q, k, v, cfg.alphas[j], seg_len)
    })?;
    gate_and_project(b, x, &heads, w, cfg)
}

/// MSR over `rows / seq_len` independent sequences stacked along rows.
pub fn msr_stacked<B: Backend>(
    b: &mut B,
    x: &B::Value,
    w: &MsrWeights<B::Value>,
    cfg: &RetentionConfig,
    mode: RetentionMode,
    seg_len: usize,
    seq_len: usize,
) -> Result<B::Value> {
    let rows = b.value(x).rows();
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(invalid(format!(
            "{rows} rows do not stack sequences of {seq_len}"
        )));
    }
    let n = rows / seq_len;
    if n == 1 {
        return msr(b, x, w, cfg, mode, seg_len);
    }
    let heads = head_outputs(b, x, w, cfg, 0, Some(seq_len), |b, j, q, k, v| {
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let (lo, hi) = (i * seq_len, (i + 1) * seq_len);
            let qi = b.slice_rows(q, lo, hi)?;
            let ki = b.slice_rows(k, lo, hi)?;
            let vi = b.slice_rows(v, lo, hi)?;
            outs.push(retention(b, mode, &qi, &ki, &vi, cfg.alphas[j], seg_len)?);
        }
        b.concat_rows(&outs)
    })?;
    gate_and_project(b, x, &heads, w, cfg)
}

/// Per-head accumulators carried between incremental calls.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionState {
    pub z: Vec<Tensor>,
    pub step: usize,
}

impl RetentionState {
    pub fn new(cfg: &RetentionConfig) -> Self {
        Self {
            z: vec![Tensor::zeros(&[cfg.head_dim, cfg.head_dim]); cfg.heads],
            step: 0,
        }
    }
}

/// Incremental recurrent MSR: consumes `x` (one or more new rows) at
/// absolute positions starting from `state.step` and advances the state.
pub fn msr_recurrent_step(
    x: &Tensor,
    w: &MsrWeights<Tensor>,
    cfg: &RetentionConfig,
    state: &mut RetentionState,
) -> Result<Tensor> {
    let b = &mut Eager;
    let mut new_z = Vec::with_capacity(cfg.heads);
    let heads = head_outputs(b, x, w, cfg, state.step, None, |b, j, q, k, v| {
        let (out, z) = retention_recurrent(b, q, k, v, cfg.alphas[j], Some(&state.z[j]))?;
        new_z.push(z);
        Ok(out)
    })?;
    let out = gate_and_project(b, x, &heads, w, cfg)?;
    state.z = new_z;
    state.step += x.rows();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Direct double sum `out_n = Σ_{m≤n} α^{n−m} (q_n·k_m) v_m`.
    fn brute_force(q: &Tensor, k: &Tensor, v: &Tensor, alpha: f64) -> Tensor {
        let (n, d) = (q.rows(), v.cols());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for m in 0..=i {
                let s: f64 = q.row(i).iter().zip(k.row(m)).map(|(a, b)| a * b).sum();
                let w = alpha.powi((i - m) as i32) * s;
                for c in 0..d {
                    out[i * d + c] += w * v.get(m, c);
                }
            }
        }
        Tensor::new(vec![n, d], out).unwrap()
    }

    #[test]
    fn alpha_schedule_values() {
        assert_eq!(alpha_schedule(1).unwrap(), vec![0.96875]);
        assert_eq!(alpha_schedule(2).unwrap(), vec![0.96875, 0.984375]);
        assert_eq!(
            alpha_schedule(4).unwrap(),
            vec![
                1.0 - 2f64.powi(-5),
                1.0 - 2f64.powi(-6),
                1.0 - 2f64.powi(-7),
                1.0 - 2f64.powi(-8)
            ]
        );
        assert!(alpha_schedule(0).is_err());
    }

    #[test]
    fn config_validates_dims() {
        assert!(RetentionConfig::new(8, 3).is_err());
        assert!(RetentionConfig::new(6, 2).is_err()); // head dim 3 is odd
        let c = RetentionConfig::new(16, 2).unwrap();
        assert_eq!(c.head_dim, 8);
        assert_eq!(c.thetas.len(), 4);
        assert!(c.alphas.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn decay_mask_shape() {
        let d = decay_mask(0.5, 4);
        for n in 0..4 {
            assert_eq!(d.get(n, n), 1.0);
            for m in n + 1..4 {
                assert_eq!(d.get(n, m), 0.0);
            }
            for m in 0..n {
                assert_eq!(d.get(n, m), 0.5f64.powi((n - m) as i32));
            }
        }
    }

    #[test]
    fn zero_rotation_is_plain_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = rand_t(&mut rng, 5, 6);
        let wq = rand_t(&mut rng, 6, 4);
        let wk = rand_t(&mut rng, 6, 4);
        let wv = rand_t(&mut rng, 6, 4);
        let b = &mut Eager;
        let (q, _, v) = project_qkv(b, &h, &wq, &wk, &wv, &[0.0, 0.0], 3).unwrap();
        assert_eq!(q, crate::numerics::matmul(&h, &wq).unwrap());
        assert_eq!(v, crate::numerics::matmul(&h, &wv).unwrap());
    }

    #[test]
    fn rotation_at_position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, 1, 8);
        let y = rotate(&mut Eager, &x, 0, &rotation_angles(8)).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-15);
    }

    #[test]
    fn rotated_scores_depend_only_on_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row = rand_t(&mut rng, 1, 6);
        let h = Tensor::from_rows(&vec![row.row(0).to_vec(); 8]).unwrap();
        let wq = rand_t(&mut rng, 6, 4);
        let wk = rand_t(&mut rng, 6, 4);
        let wv = rand_t(&mut rng, 6, 4);
        let b = &mut Eager;
        let (q, k, _) = project_qkv(b, &h, &wq, &wk, &wv, &[0.9, 0.3], 0).unwrap();
        let s = crate::numerics::matmul(&q, &crate::numerics::transpose(&k).unwrap()).unwrap();
        for delta in 0..3 {
            let reference = s.get(delta, 0);
            for m in 1..8 - delta {
                assert!(
                    (s.get(m + delta, m) - reference).abs() < 1e-12,
                    "delta {delta}"
                );
            }
        }
    }

    #[test]
    fn recurrent_with_zero_decay_is_per_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (
            rand_t(&mut rng, 4, 2),
            rand_t(&mut rng, 4, 2),
            rand_t(&mut rng, 4, 2),
        );
        let (out, _) = retention_recurrent(&mut Eager, &q, &k, &v, 0.0, None).unwrap();
        for n in 0..4 {
            let s: f64 = q.row(n).iter().zip(k.row(n)).map(|(a, b)| a * b).sum();
            for c in 0..2 {
                assert!((out.get(n, c) - s * v.get(n, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn parallel_undecayed_prefix_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (
            rand_t(&mut rng, 2, 3),
            rand_t(&mut rng, 2, 3),
            rand_t(&mut rng, 2, 3),
        );
        let out = retention_parallel(&mut Eager, &q, &k, &v, 1.0).unwrap();
        let kt = crate::numerics::transpose(&k).unwrap();
        let z = crate::numerics::matmul(&kt, &v).unwrap();
        let expect =
            crate::numerics::matmul(&crate::numerics::slice_rows(&q, 1, 2).unwrap(), &z).unwrap();
        assert!(
            crate::numerics::slice_rows(&out, 1, 2)
                .unwrap()
                .max_abs_diff(&expect)
                < 1e-14
        );
    }

    #[test]
    fn all_modes_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (n, seg) in [(16, 4), (24, 5), (7, 1), (9, 20)] {
            let (q, k, v) = (
                rand_t(&mut rng, n, 4),
                rand_t(&mut rng, n, 4),
                rand_t(&mut rng, n, 4),
            );
            let alpha = 0.9;
            let oracle = brute_force(&q, &k, &v, alpha);
            let b = &mut Eager;
            let rec = retention_recurrent(b, &q, &k, &v, alpha, None).unwrap().0;
            let par = retention_parallel(b, &q, &k, &v, alpha).unwrap();
            let chk = retention_chunkwise(b, &q, &k, &v, alpha, seg, None)
                .unwrap()
                .0;
            assert!(rec.max_abs_diff(&oracle) < 1e-8);
            assert!(par.max_abs_diff(&oracle) < 1e-8);
            assert!(chk.max_abs_diff(&oracle) < 1e-7);
        }
    }

    #[test]
    fn chunkwise_degenerate_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (
            rand_t(&mut rng, 6, 2),
            rand_t(&mut rng, 6, 2),
            rand_t(&mut rng, 6, 2),
        );
        let b = &mut Eager;
        let par = retention_parallel(b, &q, &k, &v, 0.8).unwrap();
        let one = retention_chunkwise(b, &q, &k, &v, 0.8, 6, None).unwrap().0;
        assert_eq!(one, par);
        let rec = retention_recurrent(b, &q, &k, &v, 0.8, None).unwrap();
        let unit = retention_chunkwise(b, &q, &k, &v, 0.8, 1, None).unwrap();
        assert!(unit.0.max_abs_diff(&rec.0) < 1e-14);
        assert!(unit.1.max_abs_diff(&rec.1) < 1e-14);
        assert!(retention_chunkwise(b, &q, &k, &v, 0.8, 0, None).is_err());
    }

    #[test]
    fn chunkwise_state_continues_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (q, k, v) = (
            rand_t(&mut rng, 10, 2),
            rand_t(&mut rng, 10, 2),
            rand_t(&mut rng, 10, 2),
        );
        let b = &mut Eager;
        let full = retention_recurrent(b, &q, &k, &v, 0.7, None).unwrap();
        let s = |t: &Tensor, a, e| crate::numerics::slice_rows(t, a, e).unwrap();
        let (_, z) =
            retention_chunkwise(b, &s(&q, 0, 4), &s(&k, 0, 4), &s(&v, 0, 4), 0.7, 3, None).unwrap();
        let (tail, z2) = retention_chunkwise(
            b,
            &s(&q, 4, 10),
            &s(&k, 4, 10),
            &s(&v, 4, 10),
            0.7,
            4,
            Some(&z),
        )
        .unwrap();
        assert!(tail.max_abs_diff(&s(&full.0, 4, 10)) < 1e-12);
        assert!(z2.max_abs_diff(&full.1) < 1e-12);
    }

    fn rand_weights(rng: &mut ChaCha8Rng, dh: usize) -> MsrWeights<Tensor> {
        MsrWeights {
            w_q: rand_t(rng, dh, dh),
            w_k: rand_t(rng, dh, dh),
            w_v: rand_t(rng, dh, dh),
            w_p: rand_t(rng, dh, dh),
            w_o: rand_t(rng, dh, dh),
            gn_gain: Tensor::vector((0..dh).map(|_| rng.random_range(0.5..1.5)).collect()),
            gn_bias: Tensor::vector((0..dh).map(|_| rng.random_range(-0.5..0.5)).collect()),
        }
    }

    #[test]
    fn msr_agrees_across_modes_and_incremental_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = RetentionConfig::new(8, 2).unwrap();
        let w = rand_weights(&mut rng, 8);
        let x = rand_t(&mut rng, 11, 8);
        let b = &mut Eager;
        let par = msr(b, &x, &w, &cfg, RetentionMode::Parallel, 4).unwrap();
        let rec = msr(b, &x, &w, &cfg, RetentionMode::Recurrent, 4).unwrap();
        let chk = msr(b, &x, &w, &cfg, RetentionMode::Chunkwise, 4).unwrap();
        assert!(par.max_abs_diff(&rec) < 1e-6);
        assert!(par.max_abs_diff(&chk) < 1e-6);

        let mut state = RetentionState::new(&cfg);
        let mut rows = Vec::new();
        for i in 0..11 {
            let xi = crate::numerics::slice_rows(&x, i, i + 1).unwrap();
            rows.push(msr_recurrent_step(&xi, &w, &cfg, &mut state).unwrap());
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        let inc = crate::numerics::concat_rows(&refs).unwrap();
        assert!(inc.max_abs_diff(&par) < 1e-6);
        assert_eq!(state.step, 11);
    }

    #[test]
    fn stacked_sequences_match_separate_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = RetentionConfig::new(8, 2).unwrap();
        let w = rand_weights(&mut rng, 8);
        let xs: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, 7, 8)).collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let stacked = crate::numerics::concat_rows(&refs).unwrap();
        let b = &mut Eager;
        for mode in [
            RetentionMode::Parallel,
            RetentionMode::Chunkwise,
            RetentionMode::Recurrent,
        ] {
            let y = msr_stacked(b, &stacked, &w, &cfg, mode, 3, 7).unwrap();
            for (i, x) in xs.iter().enumerate() {
                let alone = msr(b, x, &w, &cfg, mode, 3).unwrap();
                let part = crate::numerics::slice_rows(&y, 7 * i, 7 * i + 7).unwrap();
                assert!(alone.max_abs_diff(&part) < 1e-12);
            }
        }
        assert!(msr_stacked(b, &stacked, &w, &cfg, RetentionMode::Parallel, 3, 5).is_err());
    }

    #[test]
    fn group_norm_identity_on_standardized_input() {
        let x = Tensor::from_rows(&[[1.0, -1.0, 1.0, -1.0]]).unwrap();
        let g = Tensor::vector(vec![1.0; 4]);
        let z = Tensor::vector(vec![0.0; 4]);
        let y = group_norm(&mut Eager, &x, 2, &g, &z, GROUP_NORM_EPS).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-5);
    }

    #[test]
    fn closed_gate_silences_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = RetentionConfig::new(4, 2).unwrap();
        let mut w = rand_weights(&mut rng, 4);
        // X·W_P strongly negative for a positive input drives swish to ~0.
        w.w_p = Tensor::full(&[4, 4], -20.0);
        let x = Tensor::full(&[3, 4], 1.0);
        let y = msr(&mut Eager, &x, &w, &cfg, RetentionMode::Parallel, 3).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }
}
