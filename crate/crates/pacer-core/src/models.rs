//! Concrete environment and guest models.
//!
//! Two families. The reference pair drives relational checking: the
//! environment replays a fixed public script and accumulates the
//! observer's view of the wire, while the guest reacts to requests the
//! way a conforming transport must, with its secret showing up only in
//! packet contents, packet counts, and how long it sits on an update
//! before handing it over. The tunnel pair is the operational loop:
//! a receiver that acknowledges shaped packets cumulatively (with
//! configurable loss), and a guest that runs the real transport
//! reactions, including fast retransmit and retransmission timers.

use std::collections::{BTreeMap, BTreeSet};

use crate::engine::EpochEngine;
use crate::schedule::{ScheduleError, ScheduleUpdate, UpdateEvent};
use crate::simnet::{EnvModel, GuestModel, InboundEvent, InboundKind, SimError, SimState};
use crate::tunnel::{enqueue_app_data, indicate, make_next_packet, on_ack, on_request_arrival, on_timeout};
use crate::types::{
    mix3, CausalKind, FlowId, ObservationTrace, PacerConfig, Packet, TimeNs, TraceEvent,
    DEFAULT_SID,
};

/// Deliberate guest defects for mutation runs. All off in normal
/// operation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GuestFaults {
    /// Let the secret skew the effective times of handed-over updates.
    pub secret_into_effective_time: bool,
    /// Let the secret decide which template a request installs.
    pub secret_into_sid: bool,
}

fn conformance(step: u64, e: ScheduleError) -> SimError {
    SimError::Conformance { step, detail: e.to_string() }
}

/// Deliver every scripted event whose stamp falls inside the epoch now
/// starting. Scripts are sorted, so each event is created strictly
/// before its stamp.
fn inject_due_script(
    script: &[InboundEvent],
    cursor: &mut usize,
    st: &mut SimState,
) -> Result<(), SimError> {
    let horizon = st.now() + st.engine.cfg.epsilon;
    while *cursor < script.len() && script[*cursor].time <= horizon {
        st.deliver(script[*cursor])?;
        *cursor += 1;
    }
    Ok(())
}

fn sort_script(script: &mut [InboundEvent]) {
    script.sort_by_key(|e| (e.time, e.flow.0, e.kind));
}

/// Scripted environment for relational runs: injects the public input
/// script and watches the wire. It never reacts to what it sees, so the
/// whole input sequence is fixed up front.
pub struct ReferenceEnv {
    script: Vec<InboundEvent>,
    cursor: usize,
    seen: usize,
    observed: ObservationTrace,
}

impl ReferenceEnv {
    pub fn new(mut script: Vec<InboundEvent>) -> ReferenceEnv {
        sort_script(&mut script);
        ReferenceEnv { script, cursor: 0, seen: 0, observed: ObservationTrace::default() }
    }

    pub fn observed(&self) -> &ObservationTrace {
        &self.observed
    }
}

impl EnvModel for ReferenceEnv {
    fn step(&mut self, st: &mut SimState) -> Result<(), SimError> {
        inject_due_script(&self.script, &mut self.cursor, st)?;
        while self.seen < st.emitted.len() {
            let e = &st.emitted[self.seen];
            self.seen += 1;
            self.observed.events.push(TraceEvent {
                time: e.time,
                flow: e.flow,
                wire_size: e.packet.wire_size,
            });
        }
        Ok(())
    }

    fn public_state(&self) -> String {
        format!("cursor={}\n{}", self.cursor, self.observed.to_csv())
    }
}

struct Drip {
    remaining: u64,
    sent: u64,
}

/// Conforming guest for relational runs.
///
/// The secret enters in three ways, all of which shaping must hide: the
/// number and sizes of the payload packets prepared after a request, the
/// steps on which they are prepared, and the processing delay added to
/// each update's hand-over stamp. Everything else about a reaction, in
/// particular the effective time and the installed template, is computed
/// from the public event alone.
pub struct ReferenceGuest {
    pub secret: u64,
    pub faults: GuestFaults,
    drip: BTreeMap<FlowId, Drip>,
    consumed: u64,
    handed_over: u64,
}

impl ReferenceGuest {
    pub fn new(secret: u64) -> ReferenceGuest {
        ReferenceGuest::with_faults(secret, GuestFaults::default())
    }

    pub fn with_faults(secret: u64, faults: GuestFaults) -> ReferenceGuest {
        ReferenceGuest { secret, faults, drip: BTreeMap::new(), consumed: 0, handed_over: 0 }
    }

    /// How long this guest sits on an update before handing it over.
    /// Secret-dependent by design, bounded by the conformance window.
    fn processing_delay(&self, cfg: &PacerConfig) -> TimeNs {
        TimeNs(mix3(self.secret, 0, 0) % (cfg.delta_delay.0 + 1))
    }

    fn drip_count(&self, flow: FlowId) -> u64 {
        1 + mix3(self.secret, u64::from(flow.0), 1) % 8
    }

    fn drip_phase(&self, flow: FlowId) -> u64 {
        mix3(self.secret, u64::from(flow.0), 7) % 2
    }
}

impl GuestModel for ReferenceGuest {
    fn step(&mut self, st: &mut SimState) -> Result<(), SimError> {
        let tg = st.now();
        let cfg = st.engine.cfg.clone();
        let step = st.step_count;
        let tu_delay = self.processing_delay(&cfg);

        for ev in st.take_due() {
            self.consumed += 1;
            let event = match ev.kind {
                InboundKind::Request { sid } => {
                    let base = sid.unwrap_or(DEFAULT_SID);
                    let sid = if self.faults.secret_into_sid && self.secret % 2 == 1 {
                        base + 1
                    } else {
                        base
                    };
                    self.drip.insert(
                        ev.flow,
                        Drip { remaining: self.drip_count(ev.flow), sent: 0 },
                    );
                    Some((UpdateEvent::Install { sid, anchor: Some(ev.time) },
                          Some((CausalKind::RequestArrival, ev.time))))
                }
                InboundKind::CongestionPause => Some((UpdateEvent::Pause, None)),
                InboundKind::CongestionResume => {
                    let edge = st.engine.flow(ev.flow).guest_edge;
                    Some((UpdateEvent::Resume { cwnd_edge: edge }, None))
                }
                // The reference environment never acknowledges.
                InboundKind::Ack { .. } => None,
            };
            let Some((event, cause)) = event else { continue };

            let mut te = ev.time + cfg.delta;
            if self.faults.secret_into_effective_time {
                te += TimeNs(self.secret % 3);
            }
            let temax = st.engine.temax();
            if te <= temax {
                te = temax + TimeNs(1);
            }
            let upd = ScheduleUpdate {
                queued_at: ev.time + tu_delay,
                event,
                effective_at: te,
                cause,
            };
            self.handed_over += 1;
            st.engine.enqueue_update(ev.flow, upd).map_err(|e| conformance(step, e))?;
        }

        // Prepare payload packets on the flow's secret cadence: one
        // packet every other step, phase and total count keyed by the
        // secret. Slots left uncovered become dummies at the emitter.
        let flows: Vec<FlowId> = self.drip.keys().copied().collect();
        for flow in flows {
            let phase = self.drip_phase(flow);
            let d = self.drip.get_mut(&flow).expect("drip flow vanished");
            if d.remaining == 0 || step % 2 != phase {
                continue;
            }
            d.remaining -= 1;
            let idx = d.sent;
            d.sent += 1;
            let len = 1 + (mix3(self.secret, u64::from(flow.0), 100 + idx)
                % u64::from(cfg.m_payload)) as usize;
            let bytes: Vec<u8> =
                (0..len).map(|i| (mix3(self.secret, idx, i as u64) & 0xff) as u8).collect();
            let fs = st.engine.flow_mut(flow);
            let seq = fs.next_seq;
            fs.next_seq += 1;
            fs.pkt_queue
                .push_back(Packet::data(flow, seq, bytes, tg, &cfg).expect("len <= m_payload"));
        }
        Ok(())
    }

    fn public_state(&self) -> String {
        format!("consumed={} handed_over={}", self.consumed, self.handed_over)
    }

    fn secret_tag(&self) -> u64 {
        self.secret
    }
}

#[derive(Default)]
struct Receiver {
    expected: u64,
    out_of_order: BTreeSet<u64>,
    payloads: BTreeMap<u64, Vec<u8>>,
}

/// Operational environment: a far-end receiver behind a fixed
/// round-trip. Every delivered packet, dummy or payload, produces one
/// cumulative acknowledgment stamped at the next epoch boundary after
/// the round trip. Losses are scripted as (flow, k): the k-th emission
/// of that flow, counting from zero, leaves the sender but never
/// arrives.
pub struct TunnelEnv {
    rtt: TimeNs,
    losses: BTreeSet<(u32, u64)>,
    script: Vec<InboundEvent>,
    cursor: usize,
    seen: usize,
    observed: ObservationTrace,
    emit_count: BTreeMap<u32, u64>,
    recv: BTreeMap<u32, Receiver>,
}

impl TunnelEnv {
    pub fn new(mut script: Vec<InboundEvent>, rtt: TimeNs, losses: BTreeSet<(u32, u64)>) -> TunnelEnv {
        assert!(rtt > TimeNs::ZERO, "a zero round trip would acknowledge into the past");
        sort_script(&mut script);
        TunnelEnv {
            rtt,
            losses,
            script,
            cursor: 0,
            seen: 0,
            observed: ObservationTrace::default(),
            emit_count: BTreeMap::new(),
            recv: BTreeMap::new(),
        }
    }

    pub fn observed(&self) -> &ObservationTrace {
        &self.observed
    }

    /// The application bytes the receiver has reassembled for a flow,
    /// in sequence order. Padding and dummies contribute nothing.
    pub fn received_payload(&self, flow: FlowId) -> Vec<u8> {
        self.recv
            .get(&flow.0)
            .map(|r| r.payloads.values().flatten().copied().collect())
            .unwrap_or_default()
    }
}

impl EnvModel for TunnelEnv {
    fn step(&mut self, st: &mut SimState) -> Result<(), SimError> {
        inject_due_script(&self.script, &mut self.cursor, st)?;
        let eps = st.engine.cfg.epsilon;
        while self.seen < st.emitted.len() {
            let e = st.emitted[self.seen].clone();
            self.seen += 1;
            self.observed.events.push(TraceEvent {
                time: e.time,
                flow: e.flow,
                wire_size: e.packet.wire_size,
            });
            let k = self.emit_count.entry(e.flow.0).or_insert(0);
            let nth = *k;
            *k += 1;
            if self.losses.contains(&(e.flow.0, nth)) {
                continue;
            }
            let r = self.recv.entry(e.flow.0).or_default();
            if !e.packet.payload.is_empty() {
                r.payloads.entry(e.packet.seq).or_insert_with(|| e.packet.payload.clone());
            }
            if e.packet.seq == r.expected {
                r.expected += 1;
                while r.out_of_order.remove(&r.expected) {
                    r.expected += 1;
                }
            } else if e.packet.seq > r.expected {
                r.out_of_order.insert(e.packet.seq);
            }
            st.deliver(InboundEvent {
                flow: e.flow,
                time: (e.time + self.rtt).round_up_to(eps),
                kind: InboundKind::Ack { ack_seq: r.expected },
            })?;
        }
        Ok(())
    }

    fn public_state(&self) -> String {
        let recv: Vec<String> =
            self.recv.iter().map(|(f, r)| format!("{}:{}", f, r.expected)).collect();
        format!("cursor={} recv=[{}]\n{}", self.cursor, recv.join(","), self.observed.to_csv())
    }
}

/// Operational guest: the real transport reactions on every flow.
///
/// A request instantiates the flow's schedule and starts a response of
/// `response_packets` full payload chunks, one readied per step. Acks
/// run the cumulative/duplicate logic; an armed retransmission timer
/// fires `rto_epochs` epochs after the last forward progress.
pub struct TunnelGuest {
    pub secret: u64,
    pub response_packets: u64,
    pub rto_epochs: u64,
    resp: BTreeMap<u32, u64>,
    chunk_idx: BTreeMap<u32, u64>,
}

impl TunnelGuest {
    pub fn new(secret: u64, response_packets: u64, rto_epochs: u64) -> TunnelGuest {
        assert!(rto_epochs > 0, "the retransmission timer needs a horizon");
        TunnelGuest {
            secret,
            response_packets,
            rto_epochs,
            resp: BTreeMap::new(),
            chunk_idx: BTreeMap::new(),
        }
    }

    /// The deterministic bytes of the `idx`-th response chunk on a
    /// flow. Public so tests can recompute the stream the receiver
    /// should end up with.
    pub fn chunk(&self, flow: u32, idx: u64, m_payload: u32) -> Vec<u8> {
        (0..m_payload as usize)
            .map(|i| (mix3(self.secret ^ u64::from(flow), idx, i as u64) & 0xff) as u8)
            .collect()
    }
}

impl GuestModel for TunnelGuest {
    fn step(&mut self, st: &mut SimState) -> Result<(), SimError> {
        let tg = st.now();
        let cfg = st.engine.cfg.clone();
        let step = st.step_count;

        for ev in st.take_due() {
            match ev.kind {
                InboundKind::Request { sid } => {
                    {
                        let SimState { engine, log, .. } = st;
                        let EpochEngine { flows, db, causal, .. } = engine;
                        let fs = flows.get_mut(&ev.flow).expect("request for unknown flow");
                        on_request_arrival(fs, ev.time, db, &cfg, log, causal)
                            .map_err(|e| conformance(step, e))?;
                        if !fs.key_installed {
                            continue;
                        }
                    }
                    self.resp.insert(ev.flow.0, self.response_packets);
                    if let Some(sid) = sid {
                        let temax = st.engine.temax();
                        let upd = {
                            let SimState { engine, log, .. } = st;
                            let fs = engine.flows.get_mut(&ev.flow).expect("unknown flow");
                            indicate(fs, sid, tg, &cfg, temax, log)
                        };
                        st.engine.enqueue_update(ev.flow, upd).map_err(|e| conformance(step, e))?;
                    }
                }
                InboundKind::Ack { ack_seq } => {
                    let temax = st.engine.temax();
                    let ups = on_ack(st.engine.flow_mut(ev.flow), ack_seq, ev.time, &cfg, temax);
                    for u in ups {
                        st.engine.enqueue_update(ev.flow, u).map_err(|e| conformance(step, e))?;
                    }
                }
                InboundKind::CongestionPause => {
                    let temax = st.engine.temax();
                    let te = (ev.time + cfg.delta).max(temax + TimeNs(1));
                    let upd = ScheduleUpdate {
                        queued_at: ev.time,
                        event: UpdateEvent::Pause,
                        effective_at: te,
                        cause: None,
                    };
                    st.engine.enqueue_update(ev.flow, upd).map_err(|e| conformance(step, e))?;
                }
                InboundKind::CongestionResume => {
                    let temax = st.engine.temax();
                    let te = (ev.time + cfg.delta).max(temax + TimeNs(1));
                    let edge = st.engine.flow(ev.flow).guest_edge;
                    let upd = ScheduleUpdate {
                        queued_at: ev.time,
                        event: UpdateEvent::Resume { cwnd_edge: edge },
                        effective_at: te,
                        cause: None,
                    };
                    st.engine.enqueue_update(ev.flow, upd).map_err(|e| conformance(step, e))?;
                }
            }
        }

        // Ready one response chunk per flow per step.
        let resp_flows: Vec<u32> = self.resp.keys().copied().collect();
        for flow in resp_flows {
            let rem = self.resp.get_mut(&flow).expect("response flow vanished");
            if *rem == 0 {
                continue;
            }
            *rem -= 1;
            let idx = *self.chunk_idx.get(&flow).unwrap_or(&0);
            self.chunk_idx.insert(flow, idx + 1);
            let chunk = self.chunk(flow, idx, cfg.m_payload);
            let SimState { engine, log, .. } = st;
            enqueue_app_data(engine.flow_mut(FlowId(flow)), &chunk, tg, log);
        }

        // Packetize whatever the receive window admits, then manage the
        // retransmission timer.
        let flows: Vec<FlowId> = st.engine.flows.keys().copied().collect();
        for flow in flows {
            let fs = st.engine.flow_mut(flow);
            while !fs.outbound.is_empty() && fs.rwnd > 0 {
                let p = make_next_packet(fs, &cfg, tg);
                fs.pkt_queue.push_back(p);
            }

            if fs.sent_unacked.is_empty() {
                fs.rto_deadline = None;
                continue;
            }
            match fs.rto_deadline {
                None => {
                    fs.rto_deadline = Some(tg + TimeNs(self.rto_epochs * cfg.epsilon.0));
                }
                Some(d) if tg >= d => {
                    let temax = st.engine.temax();
                    let ups = on_timeout(st.engine.flow_mut(flow), tg, &cfg, temax);
                    for u in ups {
                        st.engine.enqueue_update(flow, u).map_err(|e| conformance(step, e))?;
                    }
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn public_state(&self) -> String {
        let resp: Vec<String> = self.resp.iter().map(|(f, r)| format!("{}:{}", f, r)).collect();
        format!("resp=[{}]", resp.join(","))
    }

    fn secret_tag(&self) -> u64 {
        self.secret
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{ScheduleDb, ScheduleTemplate};
    use crate::simnet::run_lockstep;
    use crate::types::{trace_equal, PacketKind};

    // epsilon 100, delta_xmit 10, delta_delay 100, delta 200.
    fn cfg(n_flows: u32) -> PacerConfig {
        PacerConfig::new(TimeNs(100), TimeNs(10), TimeNs(100), 38, 1500, 1448, n_flows).unwrap()
    }

    fn state_with_flows(c: &PacerConfig, extra: &[ScheduleTemplate]) -> SimState {
        let mut db = ScheduleDb::new(c);
        for t in extra {
            db.insert(t.clone(), c).unwrap();
        }
        let mut eng = EpochEngine::new(c.clone(), db);
        for f in 1..=c.n_flows {
            eng.add_flow(crate::tunnel::FlowState::new(FlowId(f)));
        }
        SimState::new(eng)
    }

    fn request(flow: u32, t: u64, sid: Option<u32>) -> InboundEvent {
        InboundEvent { flow: FlowId(flow), time: TimeNs(t), kind: InboundKind::Request { sid } }
    }

    /// Hand trace: request at 50 installs template 1 anchored there
    /// (slots 350 and 450), so the wire shows exactly two packets,
    /// stamped 400 and 500, regardless of the secret. The secret does
    /// move the hand-over stamp, but never past the point where it
    /// could matter.
    #[test]
    fn reference_run_matches_the_hand_trace() {
        let c = cfg(1);
        let tmpl =
            ScheduleTemplate { sid: 1, initial_delay: TimeNs(300), spacing: TimeNs(100), count: 2 };
        for secret in [3u64, 999, 424242] {
            let mut st = state_with_flows(&c, std::slice::from_ref(&tmpl));
            let mut env = ReferenceEnv::new(vec![request(1, 50, Some(1))]);
            let mut guest = ReferenceGuest::new(secret);
            run_lockstep(&mut st, &mut env, &mut guest, 8).unwrap();

            let got: Vec<(u64, u32, u32)> = env
                .observed()
                .events
                .iter()
                .map(|e| (e.time.0, e.flow.0, e.wire_size))
                .collect();
            assert_eq!(got, vec![(400, 1, 1500), (500, 1, 1500)], "secret {secret}");

            // The request's causal pair was recorded with the floor.
            let rule = st
                .engine
                .causal
                .iter()
                .find(|r| r.kind == CausalKind::RequestArrival)
                .expect("request rule");
            assert_eq!(rule.event_time, TimeNs(50));
            assert_eq!(rule.earliest_effect, TimeNs(250));
            assert!(rule.holds(&c));
        }
    }

    /// Secrets with different payload drips give byte-different packets
    /// under an identical wire trace.
    #[test]
    fn drip_differences_stay_off_the_wire() {
        let c = cfg(1);
        let tmpl =
            ScheduleTemplate { sid: 1, initial_delay: TimeNs(300), spacing: TimeNs(100), count: 6 };
        // Find two secrets whose drip plans differ, so the comparison
        // below is not vacuous.
        let mut pair = None;
        'outer: for a in 1u64..20 {
            for b in (a + 1)..20 {
                let ga = ReferenceGuest::new(a);
                let gb = ReferenceGuest::new(b);
                if ga.drip_count(FlowId(1)) != gb.drip_count(FlowId(1)) {
                    pair = Some((a, b));
                    break 'outer;
                }
            }
        }
        let (sa, sb) = pair.expect("some pair under 20 differs");

        let run = |secret: u64| {
            let mut st = state_with_flows(&c, std::slice::from_ref(&tmpl));
            let mut env = ReferenceEnv::new(vec![request(1, 50, Some(1))]);
            let mut guest = ReferenceGuest::new(secret);
            run_lockstep(&mut st, &mut env, &mut guest, 12).unwrap();
            let kinds: Vec<PacketKind> = st.emitted.iter().map(|e| e.packet.kind).collect();
            (env.observed().clone(), kinds)
        };
        let (trace_a, kinds_a) = run(sa);
        let (trace_b, kinds_b) = run(sb);
        assert!(trace_equal(&trace_a, &trace_b));
        assert_eq!(trace_a.events, trace_b.events);
        assert_ne!(kinds_a, kinds_b, "drip plans {sa} and {sb} should differ");
    }

    /// Request, response, acknowledgments: the full loop. The builtin
    /// template has 16 slots; three of them carry the response, the
    /// rest are dummies, and the receiver acknowledges all of them.
    #[test]
    fn tunnel_round_trip_delivers_and_acks() {
        let c = cfg(1);
        let mut st = state_with_flows(&c, &[]);
        let mut env = TunnelEnv::new(vec![request(1, 50, None)], TimeNs(230), BTreeSet::new());
        let mut guest = TunnelGuest::new(7, 3, 5);
        run_lockstep(&mut st, &mut env, &mut guest, 30).unwrap();

        // Builtin default at this scale: first slot 350, then one per
        // epoch, 16 slots, anchored at the request.
        assert_eq!(st.emitted.len(), 16);
        assert!(st.emitted.iter().all(|e| e.packet.wire_size == 1500));
        assert_eq!(st.emitted[0].time, TimeNs(400));
        let payloads = st.emitted.iter().filter(|e| e.packet.kind == PacketKind::Payload).count();
        assert_eq!(payloads, 3);

        // Everything was acknowledged and nothing is left in flight.
        let fs = st.engine.flow(FlowId(1));
        assert_eq!(fs.last_acked, 16);
        assert!(fs.sent_unacked.is_empty());

        // The receiver reassembled the exact response bytes.
        let mut expect = Vec::new();
        for idx in 0..3 {
            expect.extend(guest.chunk(1, idx, c.m_payload));
        }
        assert_eq!(env.received_payload(FlowId(1)), expect);

        // Ack-enabled resumes were recorded with the causal floor.
        let acks: Vec<_> =
            st.engine.causal.iter().filter(|r| r.kind == CausalKind::AckEnable).collect();
        assert!(!acks.is_empty());
        assert!(acks.iter().all(|r| r.holds(&c)));
    }

    /// Dropping one payload emission forces duplicate acks, one fast
    /// retransmission, and a complete reassembly anyway.
    #[test]
    fn lost_packet_recovers_by_fast_retransmit() {
        let c = cfg(1);
        let mut st = state_with_flows(&c, &[]);
        // Third emission (seq 2) is lost; responses cover six packets.
        let losses: BTreeSet<(u32, u64)> = [(1, 2)].into();
        let mut env = TunnelEnv::new(vec![request(1, 50, None)], TimeNs(230), losses);
        // A timer horizon long enough that recovery is the fast
        // retransmit's doing alone.
        let mut guest = TunnelGuest::new(11, 6, 12);
        run_lockstep(&mut st, &mut env, &mut guest, 30).unwrap();

        // 16 scheduled slots plus the one extension requested by the
        // fast retransmit.
        assert_eq!(st.emitted.len(), 17);
        let seq2: Vec<&crate::types::Emission> =
            st.emitted.iter().filter(|e| e.packet.seq == 2).collect();
        assert_eq!(seq2.len(), 2, "the lost packet went out twice");
        assert!(seq2[1].packet.kind == PacketKind::Payload);

        // 17 emissions but 16 distinct wire sequence numbers, all acked.
        let fs = st.engine.flow(FlowId(1));
        assert_eq!(fs.last_acked, 16);
        assert!(fs.sent_unacked.is_empty());

        let mut expect = Vec::new();
        for idx in 0..6 {
            expect.extend(guest.chunk(1, idx, c.m_payload));
        }
        assert_eq!(env.received_payload(FlowId(1)), expect);
    }

    /// Losing the last packet leaves no traffic to generate duplicate
    /// acks, so recovery must come from the retransmission timer.
    #[test]
    fn tail_loss_recovers_by_timer() {
        let c = cfg(1);
        let mut st = state_with_flows(&c, &[]);
        let losses: BTreeSet<(u32, u64)> = [(1, 15)].into();
        let mut env = TunnelEnv::new(vec![request(1, 50, None)], TimeNs(230), losses);
        let mut guest = TunnelGuest::new(13, 2, 5);
        run_lockstep(&mut st, &mut env, &mut guest, 40).unwrap();

        assert_eq!(st.emitted.len(), 17);
        let last_two: Vec<u64> = st.emitted[15..].iter().map(|e| e.packet.seq).collect();
        assert_eq!(last_two, vec![15, 15], "seq 15 lost once, resent once");

        let fs = st.engine.flow(FlowId(1));
        assert_eq!(fs.last_acked, 16);
        assert!(fs.sent_unacked.is_empty());

        let timers: Vec<_> =
            st.engine.causal.iter().filter(|r| r.kind == CausalKind::TimerRetransmit).collect();
        assert_eq!(timers.len(), 1);
        assert!(timers[0].holds(&c));

        let mut expect = Vec::new();
        for idx in 0..2 {
            expect.extend(guest.chunk(1, idx, c.m_payload));
        }
        assert_eq!(env.received_payload(FlowId(1)), expect);
    }

    /// Two tunnel runs that differ only in their secret produce the
    /// same wire trace with different bytes inside it.
    #[test]
    fn tunnel_trace_is_secret_independent() {
        let c = cfg(2);
        let run = |secret: u64| {
            let mut st = state_with_flows(&c, &[]);
            let script = vec![request(1, 50, None), request(2, 170, None)];
            let mut env = TunnelEnv::new(script, TimeNs(230), BTreeSet::new());
            let mut guest = TunnelGuest::new(secret, 4, 5);
            run_lockstep(&mut st, &mut env, &mut guest, 32).unwrap();
            let bytes: Vec<Vec<u8>> =
                st.emitted.iter().map(|e| e.packet.payload.clone()).collect();
            (env.observed().clone(), bytes)
        };
        let (ta, ba) = run(21);
        let (tb, bb) = run(22);
        assert_eq!(ta.events, tb.events);
        assert!(trace_equal(&ta, &tb));
        assert_ne!(ba, bb, "different secrets should move different bytes");
    }

    /// A flow without a completed handshake ignores everything: no log,
    /// no schedule, no emissions.
    #[test]
    fn unauthenticated_flow_stays_silent() {
        let c = cfg(1);
        let mut st = state_with_flows(&c, &[]);
        st.engine.flow_mut(FlowId(1)).key_installed = false;
        let mut env = TunnelEnv::new(vec![request(1, 50, None)], TimeNs(230), BTreeSet::new());
        let mut guest = TunnelGuest::new(5, 3, 5);
        run_lockstep(&mut st, &mut env, &mut guest, 12).unwrap();
        assert!(st.emitted.is_empty());
        assert!(st.log.records.is_empty());
        assert!(st.engine.causal.is_empty());
    }
}
