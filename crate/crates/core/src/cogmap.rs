//! Operations on the cognitive map: greedy action selection, latent rollout, closed-loop
//! planning and action inference between observations.

use std::io::Write;

use ndarray::Array2;

use crate::codebook::{ActionId, Codebook};
use crate::error::{GcqError, Result};
use crate::gridworld::{render, step_env, Action, EnvState, Frame, MazeSpec};
use crate::model::{frames_matrix, CognitiveState, WorldModel};

/// Maps observations to cognitive states.
pub trait Localizer {
    fn codebook(&self) -> &Codebook;
    fn localize(&self, frame: &Frame) -> Result<CognitiveState>;
    /// Environment action carried out for an action-map symbol.
    fn env_action(&self, id: ActionId) -> Result<Action>;
}

impl Localizer for WorldModel {
    fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    fn localize(&self, frame: &Frame) -> Result<CognitiveState> {
        WorldModel::localize(self, frame)
    }

    fn env_action(&self, id: ActionId) -> Result<Action> {
        WorldModel::env_action(self, id)
    }
}

/// Counts elementary index operations performed by [`greedy_step`].
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounter {
    pub ops: u64,
}

/// Sum over factors of the shortest index distance.
pub fn map_distance(codebook: &Codebook, a: &CognitiveState, b: &CognitiveState) -> usize {
    codebook
        .factors()
        .iter()
        .zip(a.0.iter().zip(&b.0))
        .map(|(f, (&x, &y))| f.index_distance(x, y))
        .sum()
}

pub fn roll_state(codebook: &Codebook, state: &CognitiveState, action: ActionId) -> Result<CognitiveState> {
    let moves = codebook.action_map().moves(action)?;
    Ok(CognitiveState(
        codebook
            .factors()
            .iter()
            .zip(&state.0)
            .zip(moves)
            .map(|((f, &i), &mv)| f.roll(i, mv))
            .collect(),
    ))
}

/// The no-op when `current == goal`; otherwise the non-no-op action whose result is
/// closest to `goal`, earliest declared on ties.
pub fn greedy_step(
    goal: &CognitiveState,
    current: &CognitiveState,
    codebook: &Codebook,
    counter: &mut OpCounter,
) -> ActionId {
    let map = codebook.action_map();
    if goal == current {
        return map.noop();
    }
    let mut best: Option<(usize, ActionId)> = None;
    for (idx, (_, moves)) in map.entries().iter().enumerate() {
        let id = ActionId(idx);
        if id == map.noop() {
            continue;
        }
        let mut dist = 0;
        for (j, f) in codebook.factors().iter().enumerate() {
            dist += f.index_distance(f.roll(current.0[j], moves[j]), goal.0[j]);
            counter.ops += 1;
        }
        if best.is_none_or(|(d, _)| dist < d) {
            best = Some((dist, id));
        }
    }
    best.map_or(map.noop(), |(_, id)| id)
}

/// Latent rollout from an initialization sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Bases chosen for the initialization sequence.
    pub bases: Vec<usize>,
    /// State at the last initialization frame followed by one state per future action.
    pub states: Vec<CognitiveState>,
    /// Decoded frames for `states`, one per row.
    pub frames: Array2<f64>,
}

/// Quantizes `init` (with the `init_actions` between its frames) and rolls the final
/// state through `future`. Row 0 of the output is the decode of the last
/// initialization state, row `h` the prediction `h` actions ahead.
pub fn predict(
    model: &WorldModel,
    init: &[Frame],
    init_actions: &[ActionId],
    future: &[ActionId],
) -> Result<Prediction> {
    if init.is_empty() {
        return Err(GcqError::InvalidParameter {
            name: "init",
            reason: "need at least one initialization frame".into(),
        });
    }
    let x = frames_matrix(init)?;
    let q = model.quantize_frames(&x, init_actions)?;
    let last = CognitiveState(q.indices.iter().map(|path| *path.last().unwrap()).collect());
    let mut states = vec![last];
    for &a in future {
        let next = roll_state(&model.codebook, states.last().unwrap(), a)?;
        states.push(next);
    }
    let frames = model.decode_states(&states)?;
    Ok(Prediction {
        bases: q.bases,
        states,
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GoalReached,
    StepLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanTrace {
    pub states: Vec<CognitiveState>,
    pub actions: Vec<String>,
    pub observations: Vec<Frame>,
    pub positions: Vec<EnvState>,
    pub terminated_by: Termination,
    pub ops: u64,
}

impl PlanTrace {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    /// One row per visited state: `t`, factor indices, and the action taken from it
    /// (empty on the final row).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let m = self.states.first().map_or(0, |s| s.0.len());
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((0..m).map(|j| format!("factor{j}")))
            .chain(["row".into(), "col".into(), "action".into()])
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (t, s) in self.states.iter().enumerate() {
            let idx: Vec<String> = s.0.iter().map(|i| i.to_string()).collect();
            let pos = self.positions[t];
            let action = self.actions.get(t).map_or("", |a| a.as_str());
            writeln!(w, "{t},{},{},{},{action}", idx.join(","), pos.row, pos.col)?;
        }
        Ok(())
    }
}

/// Closed-loop greedy planning: localize, pick an action, execute it in the
/// environment, repeat until the no-op is chosen or `step_limit` actions were taken.
pub fn plan<L: Localizer>(
    localizer: &L,
    env: &MazeSpec,
    start: EnvState,
    goal: &Frame,
    step_limit: usize,
) -> Result<PlanTrace> {
    let codebook = localizer.codebook();
    let target = localizer.localize(goal)?;
    let mut counter = OpCounter::default();
    let mut pos = start;
    let mut frame = render(env, pos);
    let mut trace = PlanTrace {
        states: vec![localizer.localize(&frame)?],
        actions: Vec::new(),
        observations: vec![frame],
        positions: vec![pos],
        terminated_by: Termination::StepLimit,
        ops: 0,
    };
    loop {
        let current = trace.states.last().unwrap();
        let a = greedy_step(&target, current, codebook, &mut counter);
        if a == codebook.action_map().noop() {
            trace.terminated_by = Termination::GoalReached;
            break;
        }
        if trace.actions.len() >= step_limit {
            break;
        }
        pos = step_env(env, pos, localizer.env_action(a)?);
        frame = render(env, pos);
        trace.states.push(localizer.localize(&frame)?);
        trace.actions.push(codebook.action_map().symbol(a).to_string());
        trace.observations.push(frame);
        trace.positions.push(pos);
    }
    trace.ops = counter.ops;
    Ok(trace)
}

/// Actions connecting each adjacent pair of observations, found by repeated greedy
/// steps on the map. A pair with identical states yields the no-op.
pub fn inverse_model<L: Localizer>(localizer: &L, frames: &[Frame]) -> Result<Vec<Vec<ActionId>>> {
    let codebook = localizer.codebook();
    let states = frames
        .iter()
        .map(|f| localizer.localize(f))
        .collect::<Result<Vec<_>>>()?;
    infer_actions(codebook, &states)
}

/// [`inverse_model`] on already localized states.
pub fn infer_actions(codebook: &Codebook, states: &[CognitiveState]) -> Result<Vec<Vec<ActionId>>> {
    let mut counter = OpCounter::default();
    let mut out = Vec::with_capacity(states.len().saturating_sub(1));
    for (pair, w) in states.windows(2).enumerate() {
        let (from, to) = (&w[0], &w[1]);
        if from == to {
            out.push(vec![codebook.action_map().noop()]);
            continue;
        }
        let mut cur = from.clone();
        let mut segment = Vec::new();
        while &cur != to {
            let a = greedy_step(to, &cur, codebook, &mut counter);
            let next = roll_state(codebook, &cur, a)?;
            if map_distance(codebook, &next, to) >= map_distance(codebook, &cur, to) {
                return Err(GcqError::NoProgress {
                    pair,
                    from: from.0.clone(),
                    to: to.0.clone(),
                });
            }
            segment.push(a);
            cur = next;
        }
        out.push(segment);
    }
    Ok(out)
}

/// Index trajectory produced by replaying `actions` from `start`.
pub fn replay_states(codebook: &Codebook, start: &CognitiveState, actions: &[ActionId]) -> Result<Vec<CognitiveState>> {
    let mut out = vec![start.clone()];
    for &a in actions {
        let next = roll_state(codebook, out.last().unwrap(), a)?;
        out.push(next);
    }
    Ok(out)
}
