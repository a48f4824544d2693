//! Deterministic closed-loop simulation.
//!
//! A configuration wires an environment model, a guest model, and the
//! emitter into one lockstep system. Each step runs exactly one epoch in
//! a fixed order: the environment moves first (delivering inbound events
//! and observing past emissions), then the guest (consuming due events
//! and handing over schedule updates), then the emitter (applying
//! updates and firing due slots). Everything is a pure function of the
//! initial state, so paired runs that differ only in their secrets can
//! be compared step by step.
//!
//! The environment is held to one rule, enforced at delivery time: an
//! inbound event must be stamped strictly in the future. Together with
//! guests consuming an event at the first step whose time has reached
//! its stamp, this pins down exactly when every event is seen, with no
//! dependence on intra-step interleaving.

use thiserror::Error;

use crate::engine::{EngineError, EpochEngine};
use crate::tunnel::EventLog;
use crate::types::{Emission, FlowId, Sid, TimeNs};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    /// A model broke one of the run's own preconditions: an event
    /// stamped in the past, an update handed over out of order, and so
    /// on. Distinct from a masking failure; the run is invalid, not
    /// leaky.
    #[error("conformance violation at step {step}: {detail}")]
    Conformance { step: u64, detail: String },
}

/// What the environment can put in front of the guest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum InboundKind {
    /// A request arrived; `Some(sid)` also carries an application
    /// traffic indicator naming a custom template.
    Request { sid: Option<Sid> },
    /// A cumulative acknowledgment: everything below `ack_seq` arrived.
    Ack { ack_seq: u64 },
    /// Congestion feedback asking the flow to hold transmissions.
    CongestionPause,
    /// Congestion feedback lifting the hold.
    CongestionResume,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InboundEvent {
    pub flow: FlowId,
    /// Arrival stamp. Strictly greater than the simulation time when the
    /// event was created; the guest sees the event at the first step
    /// whose time has reached it.
    pub time: TimeNs,
    pub kind: InboundKind,
}

/// Everything the models share: the emitter, the inbound queue, the
/// full emission history, and the guest's profiling log.
#[derive(Debug)]
pub struct SimState {
    pub engine: EpochEngine,
    pub q_guest: Vec<InboundEvent>,
    /// Every emission so far, in emission order. Append-only.
    pub emitted: Vec<Emission>,
    pub log: EventLog,
    pub step_count: u64,
}

impl SimState {
    pub fn new(engine: EpochEngine) -> SimState {
        SimState {
            engine,
            q_guest: Vec::new(),
            emitted: Vec::new(),
            log: EventLog::default(),
            step_count: 0,
        }
    }

    pub fn now(&self) -> TimeNs {
        self.engine.now
    }

    /// Deliver an inbound event toward the guest. Rejects stamps at or
    /// before the current time: deliveries must be causal.
    pub fn deliver(&mut self, ev: InboundEvent) -> Result<(), SimError> {
        if ev.time <= self.engine.now {
            return Err(SimError::Conformance {
                step: self.step_count,
                detail: format!(
                    "inbound event for flow {} stamped {} at time {}",
                    ev.flow, ev.time, self.engine.now
                ),
            });
        }
        self.q_guest.push(ev);
        Ok(())
    }

    /// Pull every event due at the current time, in (time, flow) order.
    pub fn take_due(&mut self) -> Vec<InboundEvent> {
        let now = self.engine.now;
        let mut due = Vec::new();
        let mut rest = Vec::new();
        for ev in self.q_guest.drain(..) {
            if ev.time <= now {
                due.push(ev);
            } else {
                rest.push(ev);
            }
        }
        self.q_guest = rest;
        due.sort_by_key(|e| (e.time, e.flow.0, e.kind));
        due
    }

    /// The events still waiting, sorted, for state comparison.
    pub fn queued_inbound(&self) -> Vec<InboundEvent> {
        let mut q = self.q_guest.clone();
        q.sort_by_key(|e| (e.time, e.flow.0, e.kind));
        q
    }
}

/// The network side: delivers inbound traffic and watches the wire.
pub trait EnvModel {
    fn step(&mut self, st: &mut SimState) -> Result<(), SimError>;
    /// Everything about this model an on-path observer could know,
    /// serialized. Two runs differing only in secrets must agree on it.
    fn public_state(&self) -> String;
}

/// The protected side: reacts to inbound events by queueing packets and
/// handing schedule updates to the emitter.
pub trait GuestModel {
    fn step(&mut self, st: &mut SimState) -> Result<(), SimError>;
    /// The secret-independent part of the guest's state, serialized.
    fn public_state(&self) -> String;
    /// Tag fed to the emitter's handler-delay model this step. May
    /// depend on the secret; boundary stamping must hide it.
    fn secret_tag(&self) -> u64 {
        0
    }
}

/// One complete system: environment, guest, emitter, in lockstep.
pub struct Configuration {
    pub st: SimState,
    pub env: Box<dyn EnvModel>,
    pub guest: Box<dyn GuestModel>,
}

impl Configuration {
    pub fn new(engine: EpochEngine, env: Box<dyn EnvModel>, guest: Box<dyn GuestModel>) -> Configuration {
        Configuration { st: SimState::new(engine), env, guest }
    }

    /// Advance one epoch: environment, guest, emitter, in that order.
    pub fn step(&mut self) -> Result<(), SimError> {
        run_lockstep(&mut self.st, self.env.as_mut(), self.guest.as_mut(), 1)
    }

    pub fn run(&mut self, steps: u64) -> Result<(), SimError> {
        run_lockstep(&mut self.st, self.env.as_mut(), self.guest.as_mut(), steps)
    }
}

/// The lockstep loop itself, usable with models the caller still owns
/// (a boxed [`Configuration`] hides them behind trait objects).
pub fn run_lockstep(
    st: &mut SimState,
    env: &mut dyn EnvModel,
    guest: &mut dyn GuestModel,
    steps: u64,
) -> Result<(), SimError> {
    for _ in 0..steps {
        env.step(st)?;
        guest.step(st)?;
        let ems = st.engine.run_epoch(guest.secret_tag())?;
        st.emitted.extend(ems);
        st.step_count += 1;
    }
    Ok(())
}

/// Push a shaped emission trace and a fixed-rate probe stream through
/// one FIFO bottleneck and report each probe's sojourn time.
///
/// This is the contention side channel in miniature: a co-located
/// observer who cannot read the victim's packets can still time their
/// own. The delay series is a function of the emission trace alone, so
/// two runs with identical traces are indistinguishable to the probe no
/// matter what the packets carried.
pub fn contention_observe(
    emissions: &[Emission],
    bytes_per_tick: u64,
    probe_bytes: u64,
    probe_interval: TimeNs,
    horizon: TimeNs,
) -> Vec<TimeNs> {
    assert!(bytes_per_tick > 0, "bottleneck must drain");
    assert!(probe_interval > TimeNs::ZERO, "probes must be spaced out");
    let service = |bytes: u64| TimeNs(bytes.div_ceil(bytes_per_tick));

    // (arrival, bytes, is_probe), victim traffic first on ties so the
    // probe always queues behind same-tick emissions.
    let mut arrivals: Vec<(TimeNs, u64, bool)> = emissions
        .iter()
        .map(|e| (e.time, u64::from(e.packet.wire_size), false))
        .collect();
    let mut t = TimeNs::ZERO;
    while t <= horizon {
        arrivals.push((t, probe_bytes, true));
        t += probe_interval;
    }
    arrivals.sort_by_key(|&(time, _, is_probe)| (time, is_probe));

    let mut busy_until = TimeNs::ZERO;
    let mut delays = Vec::new();
    for (arrival, bytes, is_probe) in arrivals {
        let start = busy_until.max(arrival);
        busy_until = start + service(bytes);
        if is_probe {
            delays.push(busy_until - arrival);
        }
    }
    delays
}
