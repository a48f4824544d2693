//! The epoch-batched emitter.
//!
//! Time advances in fixed epochs of length `epsilon`. Each epoch the
//! emitter first applies every schedule update already handed over, then
//! fires every due slot, stamping all of the epoch's emissions at the
//! epoch boundary. Batching is the masking mechanism: the per-packet
//! handler may take anywhere up to `delta_xmit` to run, but since every
//! packet of the batch leaves with the same boundary timestamp, that
//! variation never reaches the wire. A delay above the bound is a hard
//! error, not a late packet.
//!
//! The emitter never inspects payload bytes and never branches on whether
//! a slot carries application data: a due slot sends the next prepared
//! packet if one exists and a dummy of identical wire size otherwise, and
//! the congestion gate compares the public emission sequence number
//! against the window edge in force at the slot's time. A closed window
//! postpones the flow's remaining calendar by whole epochs, payload and
//! dummy alike.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::schedule::{
    update_prof, ScheduleDb, ScheduleError, ScheduleUpdate, UpdateEvent, UpdateQueue,
};
use crate::tunnel::{CausalRule, FlowState};
use crate::types::{mix3, Emission, FlowId, PacerConfig, Packet, TimeNs};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum EngineError {
    /// The per-packet handler exceeded its execution bound. Emitting
    /// anyway would let the overrun skew a timestamp, so the epoch fails.
    #[error("handler took {delay} in epoch {epoch}, bound is {bound}")]
    MaskingViolation { epoch: u64, delay: TimeNs, bound: TimeNs },
    /// More due slots this epoch than the batch can carry.
    #[error("{count} emissions due in epoch {epoch}, batch holds {batch_max}")]
    BatchOverflow { epoch: u64, count: usize, batch_max: u32 },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// How long the per-packet handler takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandlerDelayModel {
    /// The same delay every epoch.
    Fixed(TimeNs),
    /// A deterministic pseudo-random delay in `[0, bound]`, keyed by
    /// epoch and by the caller's secret tag. Secret-dependent handler
    /// timing is exactly what boundary stamping must hide.
    PerEpoch { seed: u64, bound: TimeNs },
}

impl HandlerDelayModel {
    pub fn delay(&self, epoch: u64, secret_tag: u64) -> TimeNs {
        match *self {
            HandlerDelayModel::Fixed(d) => d,
            HandlerDelayModel::PerEpoch { seed, bound } => {
                TimeNs(mix3(seed, epoch, secret_tag) % (bound.0 + 1))
            }
        }
    }
}

/// Deliberate defects for mutation runs. All off in normal operation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineFaults {
    /// Add the handler delay to emission timestamps instead of stamping
    /// at the epoch boundary.
    pub delay_into_timestamp: bool,
    /// Emit the true wire size minus padding instead of the fixed size.
    pub expose_pad_len: bool,
    /// Skip emissions that would carry no payload.
    pub suppress_dummies: bool,
}

/// The shared emitter: one per host, pacing every flow.
#[derive(Debug, Clone)]
pub struct EpochEngine {
    pub cfg: PacerConfig,
    pub db: ScheduleDb,
    pub flows: BTreeMap<FlowId, FlowState>,
    pub updates: UpdateQueue,
    /// End of the last completed epoch.
    pub now: TimeNs,
    pub delay_model: HandlerDelayModel,
    pub faults: EngineFaults,
    /// Every causal pacing pair observed while applying updates.
    pub causal: Vec<CausalRule>,
}

impl EpochEngine {
    pub fn new(cfg: PacerConfig, db: ScheduleDb) -> EpochEngine {
        EpochEngine {
            cfg,
            db,
            flows: BTreeMap::new(),
            updates: UpdateQueue::new(),
            now: TimeNs::ZERO,
            delay_model: HandlerDelayModel::Fixed(TimeNs::ZERO),
            faults: EngineFaults::default(),
            causal: Vec::new(),
        }
    }

    pub fn add_flow(&mut self, fs: FlowState) {
        self.flows.insert(fs.flow, fs);
    }

    pub fn flow(&self, flow: FlowId) -> &FlowState {
        &self.flows[&flow]
    }

    pub fn flow_mut(&mut self, flow: FlowId) -> &mut FlowState {
        self.flows.get_mut(&flow).expect("unknown flow")
    }

    /// Hand a guest update over to the emitter. Fails if hand-over would
    /// come after the effective time or reuse an already-claimed one.
    pub fn enqueue_update(&mut self, flow: FlowId, upd: ScheduleUpdate) -> Result<(), ScheduleError> {
        self.updates.enqueue(flow, upd)
    }

    /// Effective-time high-water mark: new updates must claim a time
    /// strictly above this.
    pub fn temax(&self) -> TimeNs {
        self.updates.temax
    }

    pub fn epoch_index(&self) -> u64 {
        self.now.0 / self.cfg.epsilon.0
    }

    /// Run one epoch: apply handed-over updates, then fire every due
    /// slot, stamping the whole batch at the new epoch boundary.
    ///
    /// `secret_tag` feeds only the handler-delay model; with the faults
    /// all off it cannot influence emissions, which is the point.
    pub fn run_epoch(&mut self, secret_tag: u64) -> Result<Vec<Emission>, EngineError> {
        let epoch = self.epoch_index();
        let boundary = self.now + self.cfg.epsilon;

        // The handler's execution time this epoch. Checked against the
        // bound and then discarded: boundary stamping absorbs it.
        let handler_delay = self.delay_model.delay(epoch, secret_tag);
        if handler_delay > self.cfg.delta_xmit {
            return Err(EngineError::MaskingViolation {
                epoch,
                delay: handler_delay,
                bound: self.cfg.delta_xmit,
            });
        }

        // Apply every update handed over by now, in hand-over order per
        // flow. Later hand-overs wait for a later epoch.
        let update_flows: Vec<FlowId> = self.updates.flows().collect();
        for flow in update_flows {
            let fs = self.flows.get_mut(&flow).expect("update for unknown flow");
            let applied = update_prof(
                &self.db,
                &self.cfg,
                &mut fs.sched,
                self.updates.pending_mut(flow),
                self.now,
            )?;
            for upd in &applied {
                if let UpdateEvent::Resume { cwnd_edge } = upd.event {
                    fs.cwnd_raises.push((upd.effective_at, cwnd_edge));
                }
                if let Some((kind, event_time)) = upd.cause {
                    self.causal.push(CausalRule {
                        kind,
                        event_time,
                        earliest_effect: upd.effective_at,
                    });
                }
            }
        }

        // Fire due slots, flows in ascending order, each flow's slots in
        // calendar order.
        let mut emissions = Vec::new();
        for fs in self.flows.values_mut() {
            while let Some(s) = fs.sched.next_fireable_slot() {
                if s > boundary {
                    break;
                }
                if fs.next_emission_seq() >= fs.effective_cwnd_edge(s) {
                    // Window closed at this slot's time: postpone the
                    // flow's remaining calendar one epoch and retry then.
                    fs.sched.shift_unfired(self.cfg.epsilon);
                    break;
                }
                fs.sched.fire_next();
                let packet = match fs.pkt_queue.pop_front() {
                    Some(p) => p,
                    None => {
                        let seq = fs.next_seq;
                        fs.next_seq += 1;
                        Packet::dummy(fs.flow, seq, s, &self.cfg)
                    }
                };
                if self.faults.suppress_dummies && packet.payload.is_empty() {
                    continue;
                }
                track_for_retransmit(fs, &packet);
                let mut stamp = boundary;
                if self.faults.delay_into_timestamp {
                    stamp += handler_delay;
                }
                let mut packet = packet;
                if self.faults.expose_pad_len {
                    packet.wire_size = self.cfg.mtu - packet.pad_len;
                }
                emissions.push(Emission::new(stamp, packet));
            }
        }

        if emissions.len() > self.cfg.batch_max as usize {
            return Err(EngineError::BatchOverflow {
                epoch,
                count: emissions.len(),
                batch_max: self.cfg.batch_max,
            });
        }

        self.now = boundary;
        Ok(emissions)
    }
}

/// Remember an emitted packet for possible retransmission. Dummies are
/// tracked exactly like payload packets: reliability works on the wire
/// sequence, and branching on contents here would make the emitter's
/// state depend on them. A retransmission is already tracked under its
/// original send, which the tail check filters out.
fn track_for_retransmit(fs: &mut FlowState, packet: &Packet) {
    if fs.sent_unacked.back().is_none_or(|p| packet.seq > p.seq) {
        fs.sent_unacked.push_back(packet.clone());
    }
}
