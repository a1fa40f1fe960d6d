//! Synthetic recommendation environment with a scripted expert.
//!
//! A hidden unit preference vector `p` drives Bernoulli clicks with
//! probability `σ(κ⟨p, item⟩)`. Recommending an item nudges `p` towards it,
//! and clicked items are folded into an exponential history that, together
//! with `p` plus observation noise, forms the observable state.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics;
use crate::numerics::sigmoid_scalar;
use crate::trajectory::{Step, Trajectory};

pub const ITEMS_FORMAT: &str = "maskrdt-items";
pub const ITEMS_VERSION: u32 = 1;

/// Stream reserved for item generation; episode `i` uses stream `i`.
const ITEM_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub d_s: usize,
    pub catalog: usize,
    pub episode_len: usize,
    pub drift: f64,
    pub noise: f64,
    pub obs_noise: f64,
    pub history_decay: f64,
    pub sharpness: f64,
    pub r_max: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            d_s: 8,
            catalog: 20,
            episode_len: 32,
            drift: 0.02,
            noise: 0.05,
            obs_noise: 0.1,
            history_decay: 0.8,
            sharpness: 5.0,
            r_max: 1.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_s == 0 {
            return Err(invalid("state dimension must be positive"));
        }
        if self.catalog < 2 {
            return Err(invalid(format!(
                "catalog must hold at least 2 items, got {}",
                self.catalog
            )));
        }
        if self.episode_len == 0 {
            return Err(invalid("episode length must be positive"));
        }
        if !(self.drift >= 0.0 && self.noise >= 0.0 && self.obs_noise >= 0.0) {
            return Err(invalid("drift and noise levels must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.history_decay) {
            return Err(invalid("history decay must lie in [0, 1]"));
        }
        if self.r_max != 1.0 {
            return Err(invalid("clicks are binary, r_max must be 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    preference: Vec<f64>,
    history: Vec<f64>,
    observed: Vec<f64>,
    pub step: usize,
}

impl SimState {
    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    #[cfg(test)]
    pub(crate) fn preference(&self) -> &[f64] {
        &self.preference
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulator {
    pub config: SimConfig,
    items: Vec<Vec<f64>>,
}

impl Simulator {
    /// Items are random unit vectors drawn from the config seed.
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(ITEM_STREAM);
        let items = (0..config.catalog)
            .map(|_| loop {
                let mut v = normal_vec(&mut rng, config.d_s);
                if v.iter().any(|&x| x != 0.0) {
                    normalize(&mut v);
                    break v;
                }
            })
            .collect();
        Ok(Self { config, items })
    }

    pub fn with_items(config: SimConfig, items: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        if items.len() != config.catalog || items.iter().any(|v| v.len() != config.d_s) {
            return Err(invalid(format!(
                "item table does not match catalog {} × d_s {}",
                config.catalog, config.d_s
            )));
        }
        Ok(Self { config, items })
    }

    pub fn items(&self) -> &[Vec<f64>] {
        &self.items
    }

    fn observe<R: Rng + ?Sized>(
        &self,
        preference: &[f64],
        history: &[f64],
        rng: &mut R,
    ) -> Vec<f64> {
        preference
            .iter()
            .zip(history)
            .map(|(p, h)| {
                let e: f64 = rng.sample(StandardNormal);
                p + self.config.obs_noise * e + h
            })
            .collect()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> SimState {
        let mut preference = loop {
            let v = normal_vec(rng, self.config.d_s);
            if v.iter().any(|&x| x != 0.0) {
                break v;
            }
        };
        normalize(&mut preference);
        let history = vec![0.0; self.config.d_s];
        let observed = self.observe(&preference, &history, rng);
        SimState {
            preference,
            history,
            observed,
            step: 0,
        }
    }

    pub fn click_probability(&self, state: &SimState, action: usize) -> f64 {
        sigmoid_scalar(self.config.sharpness * dot(&state.preference, &self.items[action]))
    }

    /// Advances one step in place and returns the click reward.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut SimState,
        action: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if action >= self.config.catalog {
            return Err(invalid(format!(
                "action {action} outside catalog of {}",
                self.config.catalog
            )));
        }
        let prob = self.click_probability(state, action);
        let clicked = rng.random::<f64>() < prob;
        let item = &self.items[action];
        let c = &self.config;
        let mut p: Vec<f64> = state
            .preference
            .iter()
            .zip(item)
            .map(|(p, i)| {
                let e: f64 = rng.sample(StandardNormal);
                p + c.drift * i + c.noise * e
            })
            .collect();
        normalize(&mut p);
        state.preference = p;
        if clicked {
            for (h, i) in state.history.iter_mut().zip(item) {
                *h = c.history_decay * *h + (1.0 - c.history_decay) * i;
            }
        }
        state.observed = self.observe(&state.preference, &state.history, rng);
        state.step += 1;
        Ok(if clicked { c.r_max } else { 0.0 })
    }

    /// Epsilon-greedy expert: argmax of `⟨observed, item⟩`, ties to the lowest id.
    pub fn oracle_action<R: Rng + ?Sized>(&self, observed: &[f64], eps: f64, rng: &mut R) -> usize {
        if eps > 0.0 && rng.random::<f64>() < eps {
            return rng.random_range(0..self.config.catalog);
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, item) in self.items.iter().enumerate() {
            let s = dot(observed, item);
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        best
    }

    /// Runs `episodes` episodes; episode `i` draws from stream `i` of `seed`.
    pub fn rollout<P: Policy + ?Sized>(
        &self,
        policy: &P,
        episodes: usize,
        seed: u64,
    ) -> Result<Rollout> {
        let results: Vec<Result<(Trajectory, f64)>> = (0..episodes)
            .into_par_iter()
            .map(|ep| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(ep as u64);
                self.episode(policy, ep as u64, &mut rng)
            })
            .collect();
        let mut trajectories = Vec::with_capacity(episodes);
        let mut ctrs = Vec::with_capacity(episodes);
        for r in results {
            let (t, c) = r?;
            trajectories.push(t);
            ctrs.push(c);
        }
        Ok(Rollout { trajectories, ctrs })
    }

    fn episode<P: Policy + ?Sized>(
        &self,
        policy: &P,
        id: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Trajectory, f64)> {
        let mut state = self.reset(rng);
        let mut steps: Vec<Step> = Vec::with_capacity(self.config.episode_len);
        for _ in 0..self.config.episode_len {
            let obs = state.observed.clone();
            let action = policy.act(self, &steps, &obs, rng)?;
            let reward = self.step(&mut state, action, rng)?;
            steps.push(Step {
                state: obs,
                action,
                reward,
            });
        }
        let ret: f64 = steps.iter().map(|s| s.reward).sum();
        let ctr = metrics::ctr(ret, steps.len(), self.config.r_max)?;
        Ok((Trajectory::new(id, steps, 1.0)?, ctr))
    }
}

/// Anything that can choose a recommendation from the episode so far.
pub trait Policy: Sync {
    fn act(
        &self,
        sim: &Simulator,
        history: &[Step],
        observed: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<usize>;
}

#[derive(Clone, Copy, Debug)]
pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn act(&self, sim: &Simulator, _: &[Step], _: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
        Ok(rng.random_range(0..sim.config.catalog))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OraclePolicy {
    pub eps: f64,
}

impl Default for OraclePolicy {
    fn default() -> Self {
        Self { eps: 0.1 }
    }
}

impl Policy for OraclePolicy {
    fn act(
        &self,
        sim: &Simulator,
        _: &[Step],
        observed: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        Ok(sim.oracle_action(observed, self.eps, rng))
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub trajectories: Vec<Trajectory>,
    pub ctrs: Vec<f64>,
}

impl Rollout {
    pub fn mean_ctr(&self) -> f64 {
        if self.ctrs.is_empty() {
            return 0.0;
        }
        self.ctrs.iter().sum::<f64>() / self.ctrs.len() as f64
    }

    /// Population standard deviation of per-episode CTR.
    pub fn std_ctr(&self) -> f64 {
        if self.ctrs.is_empty() {
            return 0.0;
        }
        let m = self.mean_ctr();
        (self.ctrs.iter().map(|c| (c - m).powi(2)).sum::<f64>() / self.ctrs.len() as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ItemsHeader {
    format: String,
    version: u32,
    catalog: usize,
    d_s: usize,
}

pub fn write_items(path: impl AsRef<Path>, items: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = ItemsHeader {
        format: ITEMS_FORMAT.into(),
        version: ITEMS_VERSION,
        catalog: items.len(),
        d_s: items.first().map_or(0, Vec::len),
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for row in items {
        serde_json::to_writer(&mut w, row).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_items(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let err = |line, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or_else(|| err(1, "missing header".into()))??;
    let header: ItemsHeader = serde_json::from_str(&first).map_err(|e| err(1, e.to_string()))?;
    if header.format != ITEMS_FORMAT {
        return Err(err(1, format!("unexpected format {:?}", header.format)));
    }
    if header.version != ITEMS_VERSION {
        return Err(Error::Version {
            what: "item table",
            found: header.version,
            expected: ITEMS_VERSION,
        });
    }
    let mut items = Vec::with_capacity(header.catalog);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = serde_json::from_str(&line).map_err(|e| err(i + 2, e.to_string()))?;
        if row.len() != header.d_s {
            return Err(err(
                i + 2,
                format!("row has {} dims, expected {}", row.len(), header.d_s),
            ));
        }
        items.push(row);
    }
    if items.len() != header.catalog {
        return Err(err(
            items.len() + 1,
            format!("expected {} items, found {}", header.catalog, items.len()),
        ));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(cfg: SimConfig) -> Simulator {
        Simulator::new(cfg).unwrap()
    }

    #[test]
    fn items_are_unit_and_seeded() {
        let a = sim(SimConfig::default());
        let b = sim(SimConfig::default());
        assert_eq!(a, b);
        for v in a.items() {
            assert!((dot(v, v) - 1.0).abs() < 1e-12);
        }
        let c = sim(SimConfig {
            seed: 1,
            ..Default::default()
        });
        assert_ne!(a.items(), c.items());
    }

    #[test]
    fn reset_is_seeded_and_centered() {
        let s = sim(SimConfig::default());
        let r1 = s.reset(&mut ChaCha8Rng::seed_from_u64(4));
        let r2 = s.reset(&mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(r1, r2);
        assert_eq!(r1.step, 0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mean = vec![0.0; 8];
        for _ in 0..1000 {
            let st = s.reset(&mut rng);
            for (m, x) in mean.iter_mut().zip(st.observed()) {
                *m += x / 1000.0;
            }
        }
        assert!(mean.iter().all(|m| m.abs() < 0.1), "{mean:?}");
    }

    #[test]
    fn scalar_state() {
        let s = sim(SimConfig {
            d_s: 1,
            ..Default::default()
        });
        let st = s.reset(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(st.observed().len(), 1);
        assert!((st.preference()[0].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_preference_without_drift_or_noise() {
        let s = sim(SimConfig {
            drift: 0.0,
            noise: 0.0,
            ..Default::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut st = s.reset(&mut rng);
        let p0 = st.preference().to_vec();
        for a in 0..32 {
            s.step(&mut st, a % 20, &mut rng).unwrap();
            for (x, y) in st.preference().iter().zip(&p0) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_item_almost_always_clicks() {
        let cfg = SimConfig {
            sharpness: 50.0,
            drift: 0.0,
            noise: 0.0,
            ..Default::default()
        };
        let base = sim(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = base.reset(&mut rng);
        let mut items = base.items().to_vec();
        items[0] = st.preference().to_vec();
        let s = Simulator::with_items(cfg, items).unwrap();
        let clicks: f64 = (0..200)
            .map(|_| s.step(&mut st, 0, &mut rng).unwrap())
            .sum();
        assert_eq!(clicks, 200.0);
    }

    #[test]
    fn bad_action_is_rejected() {
        let s = sim(SimConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = s.reset(&mut rng);
        assert!(s.step(&mut st, 20, &mut rng).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(Simulator::new(SimConfig {
            catalog: 1,
            ..Default::default()
        })
        .is_err());
        assert!(Simulator::new(SimConfig {
            drift: -0.1,
            ..Default::default()
        })
        .is_err());
        assert!(Simulator::new(SimConfig {
            r_max: 2.0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn fully_random_oracle_is_uniform() {
        let s = sim(SimConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let obs = vec![1.0; 8];
        let mut counts = [0f64; 20];
        let n = 10_000.0;
        for _ in 0..10_000 {
            counts[s.oracle_action(&obs, 1.0, &mut rng)] += 1.0;
        }
        let e = n / 20.0;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        // 19 dof, p = 0.001 critical value
        assert!(chi2 < 43.82, "{chi2}");
    }

    #[test]
    fn greedy_oracle_picks_nearest_orthonormal_item() {
        let cfg = SimConfig {
            d_s: 3,
            catalog: 3,
            ..Default::default()
        };
        let items = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let s = Simulator::with_items(cfg, items).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(s.oracle_action(&[0.1, -0.3, 0.2], 0.0, &mut rng), 2);
        assert_eq!(s.oracle_action(&[0.1, 0.9, 0.2], 0.0, &mut rng), 1);
    }

    #[test]
    fn oracle_beats_uniform_by_margin() {
        let s = sim(SimConfig::default());
        let oracle = s
            .rollout(&OraclePolicy::default(), 1000, 1)
            .unwrap()
            .mean_ctr();
        let uniform = s.rollout(&UniformPolicy, 1000, 1).unwrap().mean_ctr();
        assert!(
            oracle - uniform >= 0.15,
            "oracle {oracle} uniform {uniform}"
        );
    }

    #[test]
    fn uniform_ctr_is_stable_across_seeds() {
        let s = sim(SimConfig::default());
        let a = s.rollout(&UniformPolicy, 500, 10).unwrap().mean_ctr();
        let b = s.rollout(&UniformPolicy, 500, 11).unwrap().mean_ctr();
        assert!((a - b).abs() < 0.02, "{a} {b}");
    }

    #[test]
    fn rollout_is_deterministic_and_binary() {
        let s = sim(SimConfig::default());
        let a = s.rollout(&OraclePolicy::default(), 20, 3).unwrap();
        let b = s.rollout(&OraclePolicy::default(), 20, 3).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        for t in &a.trajectories {
            assert_eq!(t.len(), 32);
            assert!(t
                .steps()
                .iter()
                .all(|st| st.reward == 0.0 || st.reward == 1.0));
        }
        assert!((0.0..=1.0).contains(&a.mean_ctr()));
    }

    #[test]
    fn item_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("items.jsonl");
        let s = sim(SimConfig::default());
        write_items(&p, s.items()).unwrap();
        assert_eq!(read_items(&p).unwrap(), s.items());
    }
}
