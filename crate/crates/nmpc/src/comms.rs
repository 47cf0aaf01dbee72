//! Priority-ordered message passing within one sampling round.
//!
//! Agent indices are zero-based and double as priorities: agent 0 leads.
//! The leader broadcasts its prediction to every follower; follower `i`
//! forwards its own prediction to agents `i + 1..N`.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use cotrans_core::agent::{agent_ellipsoids, AgentParams, AgentState};
use cotrans_core::constraints::Neighbor;
use cotrans_core::object::{object_pose_from_agent, object_twist_from_agent, ObjectPose, ObjectTwist};
use cotrans_core::ModelError;
use log::debug;
use nalgebra::{DVector, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fhocp::{
    receding_step, solve_follower, solve_leader, FhocpError, FollowerInput, FollowerRateMap, HorizonSolution,
    LeaderInput, ObjectReference, SolveStatus, TerminalMode,
};
use crate::sim::Scenario;

/// Largest allowed gap between transmitted and recomputed object fields.
pub const MESSAGE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CommsError {
    #[error("message log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("message log line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("message from agent {sender} is inconsistent with its configuration by {gap:.3e}")]
    Inconsistent { sender: usize, gap: f64 },
    #[error("malformed message from agent {sender}: {detail}")]
    Malformed { sender: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Predicted trajectory of one agent over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMessage {
    pub sender: usize,
    pub recipients: Vec<usize>,
    pub round: usize,
    pub t: f64,
    pub node_times: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub qdot: Vec<Vec<f64>>,
    /// `[x, y, z, phi, theta, psi]` per node.
    pub object_pose: Vec<[f64; 6]>,
    /// `[v; omega]` per node.
    pub object_twist: Vec<[f64; 6]>,
}

impl PredictionMessage {
    pub fn from_solution(
        sender: usize,
        recipients: Vec<usize>,
        round: usize,
        t: f64,
        node_times: Vec<f64>,
        solution: &HorizonSolution,
    ) -> Self {
        let n = solution.states.first().map_or(0, |x| x.len() / 2);
        Self {
            sender,
            recipients,
            round,
            t,
            node_times,
            q: solution.states.iter().map(|x| x.rows(0, n).iter().copied().collect()).collect(),
            qdot: solution.states.iter().map(|x| x.rows(n, n).iter().copied().collect()).collect(),
            object_pose: solution.object_poses.iter().map(|p| p.to_vector().into()).collect(),
            object_twist: solution.object_twists.iter().map(|v| v.to_vector().into()).collect(),
        }
    }

    pub fn nodes(&self) -> usize {
        self.q.len()
    }

    pub fn q_at(&self, k: usize) -> DVector<f64> {
        DVector::from_vec(self.q[k].clone())
    }

    pub fn qdot_at(&self, k: usize) -> DVector<f64> {
        DVector::from_vec(self.qdot[k].clone())
    }

    pub fn reference(&self) -> Vec<ObjectReference> {
        self.object_pose
            .iter()
            .zip(&self.object_twist)
            .map(|(p, v)| ObjectReference {
                pose: ObjectPose::from_vector(&Vector6::from(*p)),
                twist: ObjectTwist::from_vector(&Vector6::from(*v)),
            })
            .collect()
    }

    /// Recomputes the object fields from the transmitted configuration and
    /// returns the largest deviation.
    pub fn verify(&self, sender: &AgentParams<f64>) -> Result<f64, CommsError> {
        let k = self.nodes();
        if self.qdot.len() != k
            || self.object_pose.len() != k
            || self.object_twist.len() != k
            || self.node_times.len() != k
        {
            return Err(CommsError::Malformed { sender: self.sender, detail: "field lengths differ".into() });
        }
        let mut gap = 0.0f64;
        for i in 0..k {
            let q = self.q_at(i);
            let qd = self.qdot_at(i);
            let pose = object_pose_from_agent(sender, &q)?.to_vector();
            let twist = object_twist_from_agent(sender, &q, &qd)?.to_vector();
            gap = gap.max((pose - Vector6::from(self.object_pose[i])).amax());
            gap = gap.max((twist - Vector6::from(self.object_twist[i])).amax());
        }
        if !(gap <= MESSAGE_TOL) {
            return Err(CommsError::Inconsistent { sender: self.sender, gap });
        }
        Ok(gap)
    }
}

/// Delivery of prediction messages between agents.
pub trait Bus: Send {
    fn publish(&mut self, msg: PredictionMessage) -> Result<(), CommsError>;
    /// Messages of `round` addressed to `recipient`, ordered by sender.
    fn inbox(&mut self, round: usize, recipient: usize) -> Result<Vec<PredictionMessage>, CommsError>;
}

/// In-process bus that keeps the current round and appends every message as
/// one JSON line to an optional log.
pub struct LiveBus {
    round: Vec<PredictionMessage>,
    log: Option<Box<dyn Write + Send>>,
    pub sent: usize,
}

impl LiveBus {
    pub fn new(log: Option<Box<dyn Write + Send>>) -> Self {
        Self { round: Vec::new(), log, sent: 0 }
    }

    pub fn flush(&mut self) -> Result<(), CommsError> {
        if let Some(w) = &mut self.log {
            w.flush()?;
        }
        Ok(())
    }
}

impl Bus for LiveBus {
    fn publish(&mut self, msg: PredictionMessage) -> Result<(), CommsError> {
        if let Some(w) = &mut self.log {
            serde_json::to_writer(&mut *w, &msg).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        self.round.retain(|m| m.round == msg.round);
        self.round.push(msg);
        self.sent += 1;
        Ok(())
    }

    fn inbox(&mut self, round: usize, recipient: usize) -> Result<Vec<PredictionMessage>, CommsError> {
        let mut out: Vec<_> =
            self.round.iter().filter(|m| m.round == round && m.recipients.contains(&recipient)).cloned().collect();
        out.sort_by_key(|m| m.sender);
        Ok(out)
    }
}

/// Serves messages from a recorded log instead of the live solves, and
/// counts published messages that differ from the recording.
pub struct ReplayBus {
    pending: VecDeque<PredictionMessage>,
    current: Vec<PredictionMessage>,
    pub mismatches: usize,
    pub published: usize,
}

impl ReplayBus {
    pub fn from_reader(reader: impl BufRead) -> Result<Self, CommsError> {
        let mut pending = VecDeque::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            pending.push_back(serde_json::from_str(&line).map_err(|source| CommsError::Parse { line: i + 1, source })?);
        }
        Ok(Self { pending, current: Vec::new(), mismatches: 0, published: 0 })
    }

    pub fn remaining(&self) -> usize {
        self.pending.len()
    }

    fn load_round(&mut self, round: usize) {
        if self.current.first().is_some_and(|m| m.round == round) {
            return;
        }
        self.current.clear();
        while self.pending.front().is_some_and(|m| m.round < round) {
            self.pending.pop_front();
        }
        while self.pending.front().is_some_and(|m| m.round == round) {
            self.current.push(self.pending.pop_front().expect("front exists"));
        }
    }
}

impl Bus for ReplayBus {
    fn publish(&mut self, msg: PredictionMessage) -> Result<(), CommsError> {
        self.load_round(msg.round);
        self.published += 1;
        if !self.current.iter().any(|m| *m == msg) {
            self.mismatches += 1;
        }
        Ok(())
    }

    fn inbox(&mut self, round: usize, recipient: usize) -> Result<Vec<PredictionMessage>, CommsError> {
        self.load_round(round);
        let mut out: Vec<_> = self.current.iter().filter(|m| m.recipients.contains(&recipient)).cloned().collect();
        out.sort_by_key(|m| m.sender);
        Ok(out)
    }
}

/// Per-agent summary attached to an aborted round.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDiagnostic {
    pub agent: usize,
    pub status: Option<SolveStatus>,
    pub max_violation: f64,
    pub worst_constraint: Option<(String, f64)>,
    pub tracking_error: Option<f64>,
    pub error: Option<String>,
}

impl AgentDiagnostic {
    fn from_solution(agent: usize, s: &HorizonSolution) -> Self {
        Self {
            agent,
            status: Some(s.status),
            max_violation: s.max_violation,
            worst_constraint: s.worst_constraint.clone(),
            tracking_error: s.tracking_error,
            error: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RoundError {
    #[error("round {round}: agent {agent} solve failed: {source}")]
    Solve { round: usize, agent: usize, source: FhocpError, diagnostics: Vec<AgentDiagnostic> },
    #[error("round {round}: agent {agent} problem is infeasible")]
    Infeasible { round: usize, agent: usize, diagnostics: Vec<AgentDiagnostic> },
    #[error("round {round}: agent {agent}: {source}")]
    Message { round: usize, agent: usize, source: CommsError },
}

impl RoundError {
    pub fn diagnostics(&self) -> &[AgentDiagnostic] {
        match self {
            RoundError::Solve { diagnostics, .. } | RoundError::Infeasible { diagnostics, .. } => diagnostics,
            RoundError::Message { .. } => &[],
        }
    }

    /// Whether the abort traces back to a constraint already violated at the
    /// current state.
    pub fn is_initial_infeasibility(&self) -> bool {
        matches!(self, RoundError::Solve { source: FhocpError::InitialInfeasible { .. }, .. })
    }
}

/// Warm starts and last applied controls carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamController {
    pub warm: Vec<Vec<DVector<f64>>>,
    pub applied: Vec<DVector<f64>>,
    pub leader_mode: Option<TerminalMode>,
}

impl TeamController {
    /// Starts every agent from the input that holds it still.
    pub fn new(scn: &Scenario, states: &[AgentState<f64>]) -> Result<Self, ModelError> {
        let mut warm = Vec::new();
        let mut applied = Vec::new();
        for (a, s) in scn.team.iter().zip(states) {
            let u = cotrans_core::coupled::equilibrium_input(a, &scn.object, &s.q)?;
            warm.push(vec![u.clone(); scn.grid.intervals]);
            applied.push(u);
        }
        Ok(Self { warm, applied, leader_mode: None })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub controls: Vec<DVector<f64>>,
    pub solutions: Vec<HorizonSolution>,
    pub messages: usize,
}

fn ellipsoid_neighbors(
    scn: &Scenario,
    agents: impl Iterator<Item = usize>,
    qs: &[DVector<f64>],
) -> Result<Vec<Neighbor<f64>>, ModelError> {
    agents.map(|l| Ok(Neighbor { id: l, ellipsoids: agent_ellipsoids(&scn.team[l], &qs[l])? })).collect()
}

/// One sampling round: the leader solves, then each follower in priority
/// order after receiving the predictions of every agent ahead of it.
pub fn run_round(
    scn: &Scenario,
    round: usize,
    t: f64,
    states: &[AgentState<f64>],
    ctrl: &mut TeamController,
    bus: &mut dyn Bus,
) -> Result<RoundOutcome, RoundError> {
    let n = scn.team.len();
    let qs: Vec<DVector<f64>> = states.iter().map(|s| s.q.clone()).collect();
    let node_times = scn.grid.node_times(t);
    let mut solutions: Vec<HorizonSolution> = Vec::with_capacity(n);
    let mut messages = 0;
    let diags = |sols: &[HorizonSolution]| -> Vec<AgentDiagnostic> {
        sols.iter().enumerate().map(|(i, s)| AgentDiagnostic::from_solution(i, s)).collect()
    };
    let solve_err = |agent: usize, source: FhocpError, sols: &[HorizonSolution]| {
        let mut diagnostics = diags(sols);
        diagnostics.push(AgentDiagnostic {
            agent,
            status: None,
            max_violation: f64::NAN,
            worst_constraint: None,
            tracking_error: None,
            error: Some(source.to_string()),
        });
        RoundError::Solve { round, agent, source, diagnostics }
    };
    let model_err = |agent: usize, e: ModelError| RoundError::Message { round, agent, source: CommsError::Model(e) };

    let others = ellipsoid_neighbors(scn, 1..n, &qs).map_err(|e| model_err(0, e))?;
    let followers: Vec<FollowerRateMap> = (1..n)
        .map(|l| FollowerRateMap::new(l, &scn.team[l], &qs[l]))
        .collect::<Result<_, _>>()
        .map_err(|e| model_err(0, e))?;
    let leader = solve_leader(&LeaderInput {
        agent: &scn.team[0],
        object: &scn.object,
        x_des: scn.x_des,
        obstacles: &scn.obstacles,
        neighbors: &others,
        followers: &followers,
        state: &states[0],
        u_prev: &ctrl.applied[0],
        warm: &ctrl.warm[0],
        grid: scn.grid,
        settings: &scn.leader,
        previous_mode: ctrl.leader_mode,
    })
    .map_err(|e| solve_err(0, e, &solutions))?;
    solutions.push(leader);
    if solutions[0].status == SolveStatus::Infeasible {
        return Err(RoundError::Infeasible { round, agent: 0, diagnostics: diags(&solutions) });
    }
    if n > 1 {
        let msg = PredictionMessage::from_solution(0, (1..n).collect(), round, t, node_times.clone(), &solutions[0]);
        bus.publish(msg).map_err(|source| RoundError::Message { round, agent: 0, source })?;
        messages += 1;
    }

    for i in 1..n {
        let inbox = bus.inbox(round, i).map_err(|source| RoundError::Message { round, agent: i, source })?;
        for m in &inbox {
            if m.sender >= i || m.round != round || m.nodes() != scn.grid.intervals + 1 {
                return Err(RoundError::Message {
                    round,
                    agent: i,
                    source: CommsError::Malformed {
                        sender: m.sender,
                        detail: "message violates the round order".into(),
                    },
                });
            }
            m.verify(&scn.team[m.sender]).map_err(|source| RoundError::Message { round, agent: i, source })?;
        }
        let senders: Vec<usize> = inbox.iter().map(|m| m.sender).collect();
        if senders != (0..i).collect::<Vec<_>>() {
            return Err(RoundError::Message {
                round,
                agent: i,
                source: CommsError::Malformed {
                    sender: 0,
                    detail: format!("expected messages from 0..{i}, got {senders:?}"),
                },
            });
        }
        let reference = inbox[0].reference();
        let predicted: Vec<Vec<Neighbor<f64>>> = (0..=scn.grid.intervals)
            .map(|k| {
                inbox
                    .iter()
                    .map(|m| {
                        Ok(Neighbor { id: m.sender, ellipsoids: agent_ellipsoids(&scn.team[m.sender], &m.q_at(k))? })
                    })
                    .collect::<Result<Vec<_>, ModelError>>()
            })
            .collect::<Result<_, _>>()
            .map_err(|e| model_err(i, e))?;
        let current = ellipsoid_neighbors(scn, i + 1..n, &qs).map_err(|e| model_err(i, e))?;
        let sol = solve_follower(&FollowerInput {
            agent: &scn.team[i],
            object: &scn.object,
            reference: &reference,
            obstacles: &scn.obstacles,
            current: &current,
            predicted: &predicted,
            state: &states[i],
            u_prev: &ctrl.applied[i],
            warm: &ctrl.warm[i],
            grid: scn.grid,
            settings: &scn.follower,
        })
        .map_err(|e| solve_err(i, e, &solutions))?;
        solutions.push(sol);
        if solutions[i].status == SolveStatus::Infeasible {
            return Err(RoundError::Infeasible { round, agent: i, diagnostics: diags(&solutions) });
        }
        if i + 1 < n {
            let msg =
                PredictionMessage::from_solution(i, (i + 1..n).collect(), round, t, node_times.clone(), &solutions[i]);
            bus.publish(msg).map_err(|source| RoundError::Message { round, agent: i, source })?;
            messages += 1;
        }
    }

    let mut controls = Vec::with_capacity(n);
    for (i, s) in solutions.iter().enumerate() {
        let (u0, warm) = receding_step(s);
        ctrl.warm[i] = warm;
        ctrl.applied[i] = u0.clone();
        controls.push(u0);
    }
    ctrl.leader_mode = solutions[0].terminal_mode;
    debug!(target: "comms", "round {round}: {messages} messages");
    Ok(RoundOutcome { controls, solutions, messages })
}
