//! Trajectories, returns-to-go, masked context windows, and the dataset file.
//!
//! A window ending at timestep `t` with context `C` lays out `3C` token slots
//! as `(s_k, a_k, Ĝ_k)` for `k = t−C+1 ..= t`. With `m` exposed steps the
//! visible slots are `s_{t−m+1..=t}`, `a_{t−m+1..t}` and the single RTG
//! `Ĝ_{t−m+1}`; everything else, including padding before the episode
//! start, is masked.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DATASET_FORMAT: &str = "maskrdt-traj";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(rename = "s")]
    pub state: Vec<f64>,
    #[serde(rename = "a")]
    pub action: usize,
    #[serde(rename = "r")]
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    steps: Vec<Step>,
    rtg: Vec<f64>,
}

impl Trajectory {
    pub fn new(id: u64, steps: Vec<Step>, gamma: f64) -> Result<Self> {
        let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
        let rtg = compute_rtg(&rewards, gamma)?;
        Ok(Self { id, steps, rtg })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn rtg(&self) -> &[f64] {
        &self.rtg
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// `Ĝ_t = Σ_{k≥t} γ^{k−t} r_k`, computed backwards.
pub fn compute_rtg(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(invalid("returns-to-go of an empty reward sequence"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("discount {gamma} outside [0, 1]")));
    }
    let mut rtg = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        rtg[i] = acc;
    }
    Ok(rtg)
}

/// Draws the exposed length `m` uniformly from `1..=min(C, t+1)`.
pub fn sample_mask<R: Rng + ?Sized>(t: usize, context: usize, rng: &mut R) -> usize {
    let hi = context.min(t + 1).max(1);
    rng.random_range(1..=hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    State,
    Action,
    Rtg,
}

/// Underlying content of a slot, whether or not it is visible.
#[derive(Clone, Debug, PartialEq)]
pub enum Token {
    State(Vec<f64>),
    Action(usize),
    Rtg(f64),
    Padding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSegment {
    /// First timestep of the window, `t − C + 1`; negative inside left padding.
    pub start: i64,
    /// Prediction timestep `t`.
    pub end: usize,
    pub context: usize,
    /// Number of exposed timesteps `m`.
    pub exposed: usize,
    pub tokens: Vec<Token>,
    pub visible: Vec<bool>,
    pub target_action: usize,
    pub target_reward: f64,
    pub target_next_state: Option<Vec<f64>>,
}

impl MaskedSegment {
    pub fn slot(&self, timestep: usize, kind: SlotKind) -> usize {
        let pos = (timestep as i64 - self.start) as usize;
        3 * pos
            + match kind {
                SlotKind::State => 0,
                SlotKind::Action => 1,
                SlotKind::Rtg => 2,
            }
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    fn first_exposed(&self) -> usize {
        self.end + 1 - self.exposed
    }

    pub fn visible_state_slots(&self) -> Vec<usize> {
        (self.first_exposed()..=self.end)
            .map(|k| self.slot(k, SlotKind::State))
            .collect()
    }

    pub fn visible_action_slots(&self) -> Vec<usize> {
        (self.first_exposed()..self.end)
            .map(|k| self.slot(k, SlotKind::Action))
            .collect()
    }

    pub fn rtg_slot(&self) -> usize {
        self.slot(self.first_exposed(), SlotKind::Rtg)
    }

    pub fn rtg_value(&self) -> f64 {
        match self.tokens[self.rtg_slot()] {
            Token::Rtg(g) => g,
            _ => unreachable!("rtg slot always holds an rtg token"),
        }
    }
}

fn assemble(
    steps: &[Step],
    rtg: &[f64],
    t: usize,
    context: usize,
    exposed: usize,
) -> Result<MaskedSegment> {
    if context == 0 {
        return Err(invalid("context length must be at least 1"));
    }
    if t >= steps.len() {
        return Err(invalid(format!(
            "timestep {t} out of range for trajectory of length {}",
            steps.len()
        )));
    }
    if exposed == 0 || exposed > context.min(t + 1) {
        return Err(invalid(format!(
            "exposed length {exposed} outside 1..={}",
            context.min(t + 1)
        )));
    }
    let start = t as i64 - context as i64 + 1;
    let first = t + 1 - exposed;
    let mut tokens = Vec::with_capacity(3 * context);
    let mut visible = Vec::with_capacity(3 * context);
    for pos in 0..context {
        let k = start + pos as i64;
        if k < 0 {
            tokens.extend([Token::Padding, Token::Padding, Token::Padding]);
            visible.extend([false, false, false]);
            continue;
        }
        let k = k as usize;
        let step = &steps[k];
        tokens.push(Token::State(step.state.clone()));
        tokens.push(Token::Action(step.action));
        tokens.push(Token::Rtg(rtg[k]));
        let exposed_step = k >= first;
        visible.push(exposed_step);
        visible.push(exposed_step && k < t);
        visible.push(k == first);
    }
    Ok(MaskedSegment {
        start,
        end: t,
        context,
        exposed,
        tokens,
        visible,
        target_action: steps[t].action,
        target_reward: steps[t].reward,
        target_next_state: steps.get(t + 1).map(|s| s.state.clone()),
    })
}

/// The masked window ending at `t` with `m` exposed steps.
pub fn build_segment(
    traj: &Trajectory,
    t: usize,
    context: usize,
    exposed: usize,
) -> Result<MaskedSegment> {
    assemble(&traj.steps, &traj.rtg, t, context, exposed)
}

/// Fully exposed window for acting at `t = history.len()`.
///
/// The RTG slot of the first exposed step holds the target return minus the
/// reward already collected before that step. The unknown current action and
/// reward are zero placeholders; they are masked.
pub fn inference_segment(
    history: &[Step],
    current_state: &[f64],
    target_return: f64,
    context: usize,
) -> Result<MaskedSegment> {
    let t = history.len();
    let mut steps = history.to_vec();
    steps.push(Step {
        state: current_state.to_vec(),
        action: 0,
        reward: 0.0,
    });
    let mut rtg = Vec::with_capacity(steps.len());
    let mut earned = 0.0;
    for s in &steps {
        rtg.push(target_return - earned);
        earned += s.reward;
    }
    let exposed = context.min(t + 1);
    let mut seg = assemble(&steps, &rtg, t, context, exposed)?;
    seg.target_next_state = None;
    Ok(seg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub state_dim: usize,
    pub catalog: usize,
    pub r_max: f64,
}

impl DatasetHeader {
    pub fn new(state_dim: usize, catalog: usize, r_max: f64) -> Self {
        Self {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            state_dim,
            catalog,
            r_max,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    steps: Vec<Step>,
}

/// Writes the line-delimited dataset: one header line, then one line per trajectory.
pub fn write_dataset_to<W: Write>(
    mut w: W,
    header: &DatasetHeader,
    trajs: &[Trajectory],
) -> Result<()> {
    serde_json::to_writer(&mut w, header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for t in trajs {
        let rec = Record {
            id: t.id,
            steps: t.steps.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(
    path: impl AsRef<Path>,
    header: &DatasetHeader,
    trajs: &[Trajectory],
) -> Result<()> {
    write_dataset_to(BufWriter::new(File::create(path)?), header, trajs)
}

pub fn read_dataset_from<R: Read>(
    r: R,
    source: &Path,
    gamma: f64,
) -> Result<(DatasetHeader, Vec<Trajectory>)> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(r).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))??;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != DATASET_FORMAT {
        return Err(parse_err(
            1,
            format!("unexpected format {:?}", header.format),
        ));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let mut trajs = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if rec.steps.is_empty() {
            return Err(parse_err(lineno, "trajectory has no steps".into()));
        }
        for (k, s) in rec.steps.iter().enumerate() {
            if s.state.len() != header.state_dim {
                return Err(parse_err(
                    lineno,
                    format!(
                        "step {k}: state has {} dims, expected {}",
                        s.state.len(),
                        header.state_dim
                    ),
                ));
            }
            if s.action >= header.catalog {
                return Err(parse_err(
                    lineno,
                    format!(
                        "step {k}: action {} outside catalog of {}",
                        s.action, header.catalog
                    ),
                ));
            }
            if !(0.0..=header.r_max).contains(&s.reward) {
                return Err(parse_err(
                    lineno,
                    format!(
                        "step {k}: reward {} outside [0, {}]",
                        s.reward, header.r_max
                    ),
                ));
            }
        }
        trajs.push(Trajectory::new(rec.id, rec.steps, gamma)?);
    }
    Ok((header, trajs))
}

pub fn read_dataset(
    path: impl AsRef<Path>,
    gamma: f64,
) -> Result<(DatasetHeader, Vec<Trajectory>)> {
    let path = path.as_ref();
    read_dataset_from(File::open(path)?, path, gamma)
}
