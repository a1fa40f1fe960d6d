//! Timing and memory harness comparing retention with softmax attention.
//!
//! The attention layer here exists only as a cost reference.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::{Backend, Eager, Tape, Tensor};
use crate::retention::{
    msr, msr_recurrent_step, MsrWeights, RetentionConfig, RetentionMode, RetentionState,
};

pub const CSV_HEADER: &str = "length,mode,wall_ms,peak_bytes";

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// System allocator that tracks live and peak heap bytes. Counters only
/// move when this is installed as the global allocator.
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

/// Resets the peak to the current live size and returns that baseline.
pub fn reset_peak() -> usize {
    let now = CURRENT.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    now
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Parallel,
    Chunkwise,
    Recurrent,
    Attention,
}

impl BenchMode {
    pub const ALL: [BenchMode; 4] = [
        BenchMode::Parallel,
        BenchMode::Chunkwise,
        BenchMode::Recurrent,
        BenchMode::Attention,
    ];
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Parallel => "parallel",
            BenchMode::Chunkwise => "chunkwise",
            BenchMode::Recurrent => "recurrent",
            BenchMode::Attention => "attention",
        })
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(BenchMode::Parallel),
            "chunkwise" => Ok(BenchMode::Chunkwise),
            "recurrent" => Ok(BenchMode::Recurrent),
            "attention" => Ok(BenchMode::Attention),
            other => Err(invalid(format!("unknown bench mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub hidden: usize,
    pub heads: usize,
    pub seg_len: usize,
    pub reps: usize,
    /// Time forward plus backward instead of forward only.
    pub backward: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            heads: 4,
            seg_len: 64,
            reps: 3,
            backward: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub length: usize,
    pub mode: BenchMode,
    pub wall_ms: f64,
    pub peak_bytes: usize,
}

/// Causal multi-head softmax attention with the same projection shapes as MSR.
pub fn softmax_attention<B: Backend>(
    b: &mut B,
    x: &B::Value,
    w: &MsrWeights<B::Value>,
    heads: usize,
) -> Result<B::Value> {
    let (n, d_model) = {
        let v = b.value(x);
        (v.rows(), v.cols())
    };
    let d = d_model / heads;
    let mut mask = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            mask.data_mut()[i * n + j] = -1e30;
        }
    }
    let mask = b.constant(mask);
    let q_all = b.matmul(x, &w.w_q)?;
    let k_all = b.matmul(x, &w.w_k)?;
    let v_all = b.matmul(x, &w.w_v)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = b.slice_cols(&q_all, h * d, (h + 1) * d)?;
        let k = b.slice_cols(&k_all, h * d, (h + 1) * d)?;
        let v = b.slice_cols(&v_all, h * d, (h + 1) * d)?;
        let kt = b.transpose(&k)?;
        let s = b.matmul(&q, &kt)?;
        let s = b.scale(&s, 1.0 / (d as f64).sqrt())?;
        let s = b.add(&s, &mask)?;
        let p = b.log_softmax_rows(&s)?;
        let p = b.exp(&p)?;
        outs.push(b.matmul(&p, &v)?);
    }
    let cat = if outs.len() == 1 {
        outs.pop().expect("one head")
    } else {
        b.concat_cols(&outs)?
    };
    b.matmul(&cat, &w.w_o)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| std * rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

pub fn random_weights(rng: &mut ChaCha8Rng, hidden: usize) -> MsrWeights<Tensor> {
    let s = 1.0 / (hidden as f64).sqrt();
    MsrWeights {
        w_q: random_tensor(rng, &[hidden, hidden], s),
        w_k: random_tensor(rng, &[hidden, hidden], s),
        w_v: random_tensor(rng, &[hidden, hidden], s),
        w_p: random_tensor(rng, &[hidden, hidden], s),
        w_o: random_tensor(rng, &[hidden, hidden], s),
        gn_gain: Tensor::full(&[hidden], 1.0),
        gn_bias: Tensor::zeros(&[hidden]),
    }
}

fn bind<B: Backend>(b: &mut B, w: &MsrWeights<Tensor>) -> MsrWeights<B::Value> {
    MsrWeights {
        w_q: b.param(w.w_q.clone()),
        w_k: b.param(w.w_k.clone()),
        w_v: b.param(w.w_v.clone()),
        w_p: b.param(w.w_p.clone()),
        w_o: b.param(w.w_o.clone()),
        gn_gain: b.param(w.gn_gain.clone()),
        gn_bias: b.param(w.gn_bias.clone()),
    }
}

fn layer<B: Backend>(
    b: &mut B,
    mode: BenchMode,
    x: &Tensor,
    w: &MsrWeights<Tensor>,
    cfg: &RetentionConfig,
    seg_len: usize,
) -> Result<B::Value> {
    let wv = bind(b, w);
    let xv = b.param(x.clone());
    match mode {
        BenchMode::Parallel => msr(b, &xv, &wv, cfg, RetentionMode::Parallel, seg_len),
        BenchMode::Chunkwise => msr(b, &xv, &wv, cfg, RetentionMode::Chunkwise, seg_len),
        BenchMode::Recurrent => msr(b, &xv, &wv, cfg, RetentionMode::Recurrent, seg_len),
        BenchMode::Attention => softmax_attention(b, &xv, &wv, cfg.heads),
    }
}

fn once(
    mode: BenchMode,
    x: &Tensor,
    w: &MsrWeights<Tensor>,
    cfg: &RetentionConfig,
    bc: &BenchConfig,
) -> Result<()> {
    if bc.backward {
        let mut tape = Tape::new();
        let y = layer(&mut tape, mode, x, w, cfg, bc.seg_len)?;
        let s = tape.sum(&y, None)?;
        tape.backward(s)?;
    } else {
        layer(&mut Eager, mode, x, w, cfg, bc.seg_len)?;
    }
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Median wall time of one full-sequence pass at `length`, with peak heap
/// growth over the baseline (zero unless the tracking allocator is installed).
pub fn time_layer(mode: BenchMode, length: usize, bc: &BenchConfig) -> Result<BenchRow> {
    if length == 0 {
        return Err(invalid("bench length must be positive"));
    }
    let cfg = RetentionConfig::new(bc.hidden, bc.heads)?;
    let mut rng = ChaCha8Rng::seed_from_u64(bc.seed);
    let w = random_weights(&mut rng, bc.hidden);
    let x = random_tensor(&mut rng, &[length, bc.hidden], 1.0);
    let mut times = Vec::with_capacity(bc.reps.max(1));
    let mut peak = 0;
    for _ in 0..bc.reps.max(1) {
        let base = reset_peak();
        let t0 = Instant::now();
        once(mode, &x, &w, &cfg, bc)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        peak = peak.max(peak_bytes().saturating_sub(base));
    }
    Ok(BenchRow {
        length,
        mode,
        wall_ms: median(times),
        peak_bytes: peak,
    })
}

/// Median per-token time of incremental recurrent steps taken at each of
/// `positions`, averaged over `window` consecutive tokens.
pub fn recurrent_step_ms(positions: &[usize], window: usize, bc: &BenchConfig) -> Result<Vec<f64>> {
    let cfg = RetentionConfig::new(bc.hidden, bc.heads)?;
    let mut rng = ChaCha8Rng::seed_from_u64(bc.seed);
    let w = random_weights(&mut rng, bc.hidden);
    let end = positions.iter().max().copied().unwrap_or(0) + window;
    let x = random_tensor(&mut rng, &[end, bc.hidden], 1.0);
    let rows: Vec<Tensor> = (0..end)
        .map(|i| crate::numerics::slice_rows(&x, i, i + 1))
        .collect::<Result<_>>()?;
    let mut samples = vec![Vec::new(); positions.len()];
    for _ in 0..bc.reps.max(1) {
        let mut state = RetentionState::new(&cfg);
        let mut t0 = None;
        for (i, row) in rows.iter().enumerate() {
            for (k, &p) in positions.iter().enumerate() {
                if i == p {
                    t0 = Some((k, Instant::now()));
                }
            }
            msr_recurrent_step(row, &w, &cfg, &mut state)?;
            if let Some((k, start)) = t0 {
                if i + 1 == positions[k] + window {
                    samples[k].push(start.elapsed().as_secs_f64() * 1e3 / window as f64);
                    t0 = None;
                }
            }
        }
    }
    Ok(samples.into_iter().map(median).collect())
}

/// One row per `(length, mode)`. Recurrent rows report per-token step time
/// at that position rather than a full-sequence pass.
pub fn run(lengths: &[usize], modes: &[BenchMode], bc: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &len in lengths {
        for &mode in modes {
            if mode == BenchMode::Recurrent {
                let base = reset_peak();
                let ms = recurrent_step_ms(&[len.saturating_sub(1)], 1.max(len.min(16)), bc)?[0];
                rows.push(BenchRow {
                    length: len,
                    mode,
                    wall_ms: ms,
                    peak_bytes: peak_bytes().saturating_sub(base),
                });
            } else {
                rows.push(time_layer(mode, len, bc)?);
            }
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(mut w: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.4},{}",
            r.length, r.mode, r.wall_ms, r.peak_bytes
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_is_causal_and_matches_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = random_weights(&mut rng, 8);
        let x = random_tensor(&mut rng, &[5, 8], 1.0);
        let b = &mut Eager;
        let y = softmax_attention(b, &x, &w, 2).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[4 * 8] += 1.0;
        let y2 = softmax_attention(b, &x2, &w, 2).unwrap();
        assert_eq!(y.data()[..32], y2.data()[..32]);
        // first row attends only to itself: output = v_0 · W_O
        let v0 = crate::numerics::matmul(&crate::numerics::slice_rows(&x, 0, 1).unwrap(), &w.w_v)
            .unwrap();
        let o0 = crate::numerics::matmul(&v0, &w.w_o).unwrap();
        for (a, b) in o0.data().iter().zip(y.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_for_each_mode() {
        let bc = BenchConfig {
            hidden: 8,
            heads: 2,
            seg_len: 4,
            reps: 1,
            backward: true,
            seed: 1,
        };
        let rows = run(&[16], &BenchMode::ALL, &bc).unwrap();
        assert_eq!(rows.len(), 4);
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with(CSV_HEADER));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in BenchMode::ALL {
            assert_eq!(m.to_string().parse::<BenchMode>().unwrap(), m);
        }
        assert!("softmax".parse::<BenchMode>().is_err());
    }
}
