//! Guest-side transport glue.
//!
//! This module prepares what the emitter sends: it pads application bytes
//! into fixed-size packets, tracks the flow-control and congestion state
//! the transport needs, and reacts to inbound events (requests, acks,
//! timer expiries) by requesting schedule changes. Reactions follow one
//! rule everywhere: a transmission caused by an inbound event at `e1` may
//! happen no earlier than `e1 + delta`. Request arrivals satisfy it
//! through template validation (anchored at arrival, first offset at
//! least `delta`); acks and timeouts satisfy it by carrying
//! `effective_at >= event + delta` on the updates they queue. Every such
//! pair is recorded as a [`CausalRule`] so runs can be audited after the
//! fact.

use std::collections::VecDeque;

use crate::schedule::{
    instantiate_default, ScheduleDb, ScheduleError, ScheduleUpdate, TransmitSchedule, UpdateEvent,
};
use crate::types::{
    parse_u64, CausalKind, FlowId, FormatError, PacerConfig, Packet, Sid, TimeNs,
};

/// Opaque connection identity. Only equality matters; the synthetic
/// constructor just derives distinct tuples per flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FiveTuple {
    pub src_addr: u32,
    pub src_port: u16,
    pub dst_addr: u32,
    pub dst_port: u16,
    pub proto: u8,
}

impl FiveTuple {
    pub fn synthetic(flow: FlowId) -> FiveTuple {
        FiveTuple {
            src_addr: 0x0a00_0001,
            src_port: 40_000 + flow.0 as u16,
            dst_addr: 0x0a00_0002,
            dst_port: 443,
            proto: 6,
        }
    }
}

/// One recorded causal pacing pair: an inbound event at `event_time`
/// enabled a transmission no earlier than `earliest_effect`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalRule {
    pub kind: CausalKind,
    pub event_time: TimeNs,
    pub earliest_effect: TimeNs,
}

impl CausalRule {
    /// The floor itself: effect at least `delta` after cause.
    pub fn holds(&self, cfg: &PacerConfig) -> bool {
        self.earliest_effect >= self.event_time + cfg.delta
    }
}

/// Per-flow state shared between the guest transport and the emitter.
///
/// The congestion window edge the emitter enforces is `cwnd_right_edge`
/// extended by `cwnd_raises`: each raise is an (effective time, new edge)
/// pair recorded when a resume update is applied, and counts only for
/// slots at or after its effective time. That gating is what keeps a
/// window reopening from enabling a transmission before the causal floor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowState {
    pub flow: FlowId,
    pub tuple5: FiveTuple,
    /// Next fresh sequence number (packets, not bytes).
    pub next_seq: u64,
    /// Base of the emitter-visible congestion window: the highest
    /// sequence number the emitter may send absent any raises.
    pub cwnd_right_edge: u64,
    /// Window raises applied from resume updates, ascending in effective
    /// time. A raise at (t, edge) counts for slots at or after t.
    pub cwnd_raises: Vec<(TimeNs, u64)>,
    /// Receiver flow-control window in bytes. Caps how much payload one
    /// packet carries; never affects whether a packet is sent.
    pub rwnd: u64,
    /// Application bytes awaiting packetization.
    pub outbound: VecDeque<u8>,
    /// Packets prepared and awaiting transmit slots.
    pub pkt_queue: VecDeque<Packet>,
    /// The flow's transmit calendar.
    pub sched: TransmitSchedule,
    /// Handshake complete. Until set, every inbound packet for the flow
    /// is silently ignored.
    pub key_installed: bool,

    // Transport bookkeeping.
    /// Highest cumulative ack received (next expected sequence number).
    pub last_acked: u64,
    /// Consecutive duplicate acks at `last_acked`.
    pub dup_acks: u32,
    /// The guest's own view of the window edge; the value the next
    /// resume update will carry.
    pub guest_edge: u64,
    /// Sent but unacknowledged packets, for retransmission.
    pub sent_unacked: VecDeque<Packet>,
    /// Armed retransmission timer, if any.
    pub rto_deadline: Option<TimeNs>,
    /// Ack value that already triggered a fast retransmit. Further
    /// duplicates at the same value must not retrigger; the hole is
    /// being repaired.
    pub fast_resent_at: Option<u64>,
}

impl FlowState {
    pub fn new(flow: FlowId) -> FlowState {
        // A practically unlimited window; scenarios narrow it.
        let edge = u64::MAX >> 1;
        FlowState {
            flow,
            tuple5: FiveTuple::synthetic(flow),
            next_seq: 0,
            cwnd_right_edge: edge,
            cwnd_raises: Vec::new(),
            rwnd: u64::MAX >> 1,
            outbound: VecDeque::new(),
            pkt_queue: VecDeque::new(),
            sched: TransmitSchedule::empty(),
            key_installed: true,
            last_acked: 0,
            dup_acks: 0,
            guest_edge: edge,
            sent_unacked: VecDeque::new(),
            rto_deadline: None,
            fast_resent_at: None,
        }
    }

    pub fn with_cwnd(flow: FlowId, cwnd: u64) -> FlowState {
        let mut fs = FlowState::new(flow);
        fs.cwnd_right_edge = cwnd;
        fs.guest_edge = cwnd;
        fs
    }

    /// The window edge the emitter enforces for a slot at time `at`.
    pub fn effective_cwnd_edge(&self, at: TimeNs) -> u64 {
        let raised = self
            .cwnd_raises
            .iter()
            .take_while(|(t, _)| *t <= at)
            .map(|(_, e)| *e)
            .max()
            .unwrap_or(0);
        self.cwnd_right_edge.max(raised)
    }

    /// Sequence number the next emission would use: the front of the
    /// packet queue if one is prepared, otherwise a fresh dummy.
    pub fn next_emission_seq(&self) -> u64 {
        self.pkt_queue.front().map(|p| p.seq).unwrap_or(self.next_seq)
    }

    /// Prepared packets never go backwards in sequence number.
    pub fn pkt_queue_ascending(&self) -> bool {
        self.pkt_queue
            .iter()
            .zip(self.pkt_queue.iter().skip(1))
            .all(|(a, b)| a.seq < b.seq)
    }
}

/// Accept application bytes for transmission and log their readiness.
pub fn enqueue_app_data(fs: &mut FlowState, bytes: &[u8], now: TimeNs, log: &mut EventLog) {
    fs.outbound.extend(bytes.iter().copied());
    log.push(LogRecord {
        ts: now,
        flow: fs.flow,
        event: LogEventKind::OutReady,
        arg: bytes.len() as u64,
    });
}

/// Build the packet for a due slot: drain `min(queued, rwnd, m_payload)`
/// payload bytes, pad to full size, and fall back to a pure dummy when
/// nothing may be taken. The wire never shows which case occurred.
pub fn make_next_packet(fs: &mut FlowState, cfg: &PacerConfig, now: TimeNs) -> Packet {
    let take = (fs.outbound.len() as u64)
        .min(fs.rwnd)
        .min(u64::from(cfg.m_payload)) as usize;
    let seq = fs.next_seq;
    fs.next_seq += 1;
    if take == 0 {
        return Packet::dummy(fs.flow, seq, now, cfg);
    }
    let payload: Vec<u8> = fs.outbound.drain(..take).collect();
    Packet::data(fs.flow, seq, payload, now, cfg).expect("take is bounded by m_payload")
}

/// Handle an authenticated request arrival: instantiate the default
/// template anchored at the arrival time. The unauthenticated case
/// changes nothing and logs nothing.
pub fn on_request_arrival(
    fs: &mut FlowState,
    arrival: TimeNs,
    db: &ScheduleDb,
    cfg: &PacerConfig,
    log: &mut EventLog,
    causal: &mut Vec<CausalRule>,
) -> Result<(), ScheduleError> {
    if !fs.key_installed {
        return Ok(());
    }
    log.push(LogRecord {
        ts: arrival,
        flow: fs.flow,
        event: LogEventKind::InPkt,
        arg: u64::from(cfg.mtu),
    });
    fs.sched = instantiate_default(db, fs.flow, arrival)?;
    if let Some(first) = fs.sched.next_slot_time() {
        causal.push(CausalRule {
            kind: CausalKind::RequestArrival,
            event_time: arrival,
            earliest_effect: first,
        });
    }
    Ok(())
}

/// Handle a cumulative acknowledgment (`ack_seq` = next expected
/// sequence number).
///
/// An advancing ack drops acknowledged packets, widens the guest's view
/// of the window, and queues a resume whose effective time is at least
/// `arrival + delta`: transmissions the reopened window enables happen no
/// earlier than that. The third duplicate ack queues a fast retransmit
/// plus one extra slot under the same floor, once per hole; duplicates
/// that keep arriving while the repair is in flight change nothing. An
/// ack that changes nothing returns no updates.
pub fn on_ack(
    fs: &mut FlowState,
    ack_seq: u64,
    arrival: TimeNs,
    cfg: &PacerConfig,
    temax: TimeNs,
) -> Vec<ScheduleUpdate> {
    if !fs.key_installed {
        return Vec::new();
    }
    let floor = |t: TimeNs| -> TimeNs {
        let te = t + cfg.delta;
        if te > temax { te } else { temax + TimeNs(1) }
    };
    let mut updates = Vec::new();
    if ack_seq > fs.last_acked {
        let advance = ack_seq - fs.last_acked;
        fs.last_acked = ack_seq;
        fs.dup_acks = 0;
        fs.fast_resent_at = None;
        while fs.sent_unacked.front().is_some_and(|p| p.seq < ack_seq) {
            fs.sent_unacked.pop_front();
        }
        fs.rto_deadline = None;
        fs.guest_edge += advance;
        updates.push(ScheduleUpdate {
            queued_at: arrival,
            event: UpdateEvent::Resume { cwnd_edge: fs.guest_edge },
            effective_at: floor(arrival),
            cause: Some((CausalKind::AckEnable, arrival)),
        });
    } else if ack_seq == fs.last_acked && !fs.sent_unacked.is_empty() {
        fs.dup_acks += 1;
        if fs.dup_acks >= 3 && fs.fast_resent_at != Some(ack_seq) {
            fs.dup_acks = 0;
            fs.fast_resent_at = Some(ack_seq);
            queue_retransmit(fs);
            updates.push(ScheduleUpdate {
                queued_at: arrival,
                event: UpdateEvent::ExtendOne,
                effective_at: floor(arrival),
                cause: Some((CausalKind::AckEnable, arrival)),
            });
        }
    }
    updates
}

/// Handle an expired retransmission timer. The retransmission slot is
/// requested at least `delta` after the timer fired, never earlier.
pub fn on_timeout(
    fs: &mut FlowState,
    fire_time: TimeNs,
    cfg: &PacerConfig,
    temax: TimeNs,
) -> Vec<ScheduleUpdate> {
    if fs.sent_unacked.is_empty() {
        return Vec::new();
    }
    fs.rto_deadline = None;
    queue_retransmit(fs);
    let te = fire_time + cfg.delta;
    let te = if te > temax { te } else { temax + TimeNs(1) };
    vec![ScheduleUpdate {
        queued_at: fire_time,
        event: UpdateEvent::ExtendOne,
        effective_at: te,
        cause: Some((CausalKind::TimerRetransmit, fire_time)),
    }]
}

/// Requeue the oldest unacknowledged packet, reusing its original bytes
/// and sequence number. No-op if that retransmit is already waiting.
fn queue_retransmit(fs: &mut FlowState) {
    let Some(oldest) = fs.sent_unacked.front() else {
        return;
    };
    if fs.pkt_queue.front().is_some_and(|p| p.seq == oldest.seq) {
        return;
    }
    let clone = oldest.clone();
    debug_assert!(fs.pkt_queue.front().map_or(true, |p| clone.seq < p.seq));
    fs.pkt_queue.push_front(clone);
}

/// Record an application traffic indicator and request the indicated
/// template as a custom extension of the active calendar.
pub fn indicate(
    fs: &mut FlowState,
    sid: Sid,
    now: TimeNs,
    cfg: &PacerConfig,
    temax: TimeNs,
    log: &mut EventLog,
) -> ScheduleUpdate {
    log.push(LogRecord {
        ts: now,
        flow: fs.flow,
        event: LogEventKind::Indicator,
        arg: u64::from(sid),
    });
    let te = now + cfg.delta;
    let te = if te > temax { te } else { temax + TimeNs(1) };
    ScheduleUpdate {
        queued_at: now,
        event: UpdateEvent::Install { sid, anchor: None },
        effective_at: te,
        cause: None,
    }
}

/// What the guest logs for the profiler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogEventKind {
    /// An inbound packet arrived; arg is its wire size.
    InPkt,
    /// Application bytes became ready to send; arg is the byte count.
    OutReady,
    /// The application signaled a traffic indicator; arg is the sid.
    Indicator,
}

impl LogEventKind {
    fn name(self) -> &'static str {
        match self {
            LogEventKind::InPkt => "in_pkt",
            LogEventKind::OutReady => "out_ready",
            LogEventKind::Indicator => "indicator",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogRecord {
    pub ts: TimeNs,
    pub flow: FlowId,
    pub event: LogEventKind,
    pub arg: u64,
}

/// The profiler-facing event log: `ts_ns,flow,event,arg` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    pub records: Vec<LogRecord>,
}

impl EventLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.ts, r.flow, r.event.name(), r.arg));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<EventLog, FormatError> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(FormatError {
                    line: idx + 1,
                    msg: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let event = match fields[2].trim() {
                "in_pkt" => LogEventKind::InPkt,
                "out_ready" => LogEventKind::OutReady,
                "indicator" => LogEventKind::Indicator,
                other => {
                    return Err(FormatError {
                        line: idx + 1,
                        msg: format!("unknown event {other:?}"),
                    })
                }
            };
            records.push(LogRecord {
                ts: TimeNs(parse_u64(fields[0], idx + 1)?),
                flow: FlowId(parse_u64(fields[1], idx + 1)? as u32),
                event,
                arg: parse_u64(fields[3], idx + 1)?,
            });
        }
        Ok(EventLog { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleTemplate;
    use crate::types::{mix3, PacketKind};
    use proptest::prelude::*;

    fn cfg() -> PacerConfig {
        PacerConfig::new(TimeNs(100), TimeNs(10), TimeNs(400), 38, 1500, 1448, 4).unwrap()
    }

    fn db() -> ScheduleDb {
        let c = cfg();
        let mut db = ScheduleDb::new(&c);
        db.insert(
            ScheduleTemplate { sid: 0, initial_delay: TimeNs(500), spacing: TimeNs(100), count: 4 },
            &c,
        )
        .unwrap();
        db
    }

    #[test]
    fn packetization_respects_queue_window_and_capacity() {
        let c = cfg();
        let mut log = EventLog::default();

        // Plenty queued, open window: one full payload packet.
        let mut fs = FlowState::new(FlowId(1));
        enqueue_app_data(&mut fs, &vec![7u8; 5000], TimeNs(1), &mut log);
        let p = make_next_packet(&mut fs, &c, TimeNs(2));
        assert_eq!(p.kind, PacketKind::Payload);
        assert_eq!(p.payload.len(), 1448);
        assert_eq!(p.pad_len, 0);
        assert_eq!(p.wire_size, 1500);
        assert_eq!(fs.outbound.len(), 5000 - 1448);

        // Closed receive window: a pure dummy, and the bytes stay queued.
        let mut fs = FlowState::new(FlowId(1));
        fs.rwnd = 0;
        enqueue_app_data(&mut fs, &vec![7u8; 5000], TimeNs(1), &mut log);
        let p = make_next_packet(&mut fs, &c, TimeNs(2));
        assert_eq!(p.kind, PacketKind::Dummy);
        assert_eq!(p.pad_len, 1448);
        assert_eq!(p.wire_size, 1500);
        assert_eq!(fs.outbound.len(), 5000);

        // Short payload: padded up to size.
        let mut fs = FlowState::new(FlowId(1));
        enqueue_app_data(&mut fs, &vec![9u8; 100], TimeNs(1), &mut log);
        let p = make_next_packet(&mut fs, &c, TimeNs(2));
        assert_eq!(p.payload.len(), 100);
        assert_eq!(p.pad_len, 1348);
        assert_eq!(p.wire_size, 1500);
    }

    #[test]
    fn packetization_drains_in_order_with_ascending_seq() {
        let c = cfg();
        let mut log = EventLog::default();
        let mut fs = FlowState::new(FlowId(1));
        let data: Vec<u8> = (0..3000u32).map(|i| (i % 251) as u8).collect();
        enqueue_app_data(&mut fs, &data, TimeNs(1), &mut log);
        let a = make_next_packet(&mut fs, &c, TimeNs(2));
        let b = make_next_packet(&mut fs, &c, TimeNs(3));
        let rest = make_next_packet(&mut fs, &c, TimeNs(4));
        assert_eq!(a.seq, 0);
        assert_eq!(b.seq, 1);
        assert_eq!(rest.seq, 2);
        let mut joined = a.payload.clone();
        joined.extend(&b.payload);
        joined.extend(&rest.payload);
        assert_eq!(joined, data);
    }

    #[test]
    fn unauthenticated_arrivals_change_nothing() {
        let c = cfg();
        let d = db();
        let mut log = EventLog::default();
        let mut causal = Vec::new();
        let mut fs = FlowState::new(FlowId(1));
        fs.key_installed = false;
        let before = fs.clone();
        on_request_arrival(&mut fs, TimeNs(1000), &d, &c, &mut log, &mut causal).unwrap();
        assert_eq!(fs, before);
        assert!(log.records.is_empty());
        assert!(causal.is_empty());
    }

    #[test]
    fn request_arrival_instantiates_the_default_anchored_at_arrival() {
        let c = cfg();
        let d = db();
        let mut log = EventLog::default();
        let mut causal = Vec::new();
        let mut fs = FlowState::new(FlowId(1));
        on_request_arrival(&mut fs, TimeNs(1000), &d, &c, &mut log, &mut causal).unwrap();
        assert_eq!(fs.sched.anchor, TimeNs(1000));
        assert_eq!(fs.sched.next_slot_time(), Some(TimeNs(1500)));
        assert_eq!(causal.len(), 1);
        assert_eq!(causal[0].kind, CausalKind::RequestArrival);
        assert!(causal[0].holds(&c));
        assert_eq!(log.records[0].event, LogEventKind::InPkt);

        // A second request on the same flow re-instantiates afresh.
        on_request_arrival(&mut fs, TimeNs(5000), &d, &c, &mut log, &mut causal).unwrap();
        assert_eq!(fs.sched.anchor, TimeNs(5000));
        assert_eq!(fs.sched.next_slot_time(), Some(TimeNs(5500)));
    }

    #[test]
    fn advancing_ack_resumes_with_the_delay_floor() {
        let c = cfg();
        let mut fs = FlowState::with_cwnd(FlowId(1), 4);
        fs.sent_unacked.push_back(Packet::dummy(FlowId(1), 0, TimeNs(0), &c));
        fs.sent_unacked.push_back(Packet::dummy(FlowId(1), 1, TimeNs(0), &c));

        let ups = on_ack(&mut fs, 2, TimeNs(3000), &c, TimeNs(0));
        assert_eq!(ups.len(), 1);
        // delta is 500 in this configuration.
        assert_eq!(ups[0].effective_at, TimeNs(3500));
        assert_eq!(ups[0].queued_at, TimeNs(3000));
        match ups[0].event {
            UpdateEvent::Resume { cwnd_edge } => assert_eq!(cwnd_edge, 6),
            ref other => panic!("expected Resume, got {other:?}"),
        }
        assert!(fs.sent_unacked.is_empty());
        assert_eq!(fs.last_acked, 2);

        // Same cumulative ack again, nothing in flight: no state change,
        // no updates.
        let before = fs.clone();
        assert!(on_ack(&mut fs, 2, TimeNs(3100), &c, TimeNs(3500)).is_empty());
        assert_eq!(fs, before);
    }

    #[test]
    fn ack_floor_respects_the_queue_high_water_mark() {
        let c = cfg();
        let mut fs = FlowState::with_cwnd(FlowId(1), 4);
        fs.sent_unacked.push_back(Packet::dummy(FlowId(1), 0, TimeNs(0), &c));
        // A pending update already claimed an effective time beyond the
        // floor; the new one must exceed it.
        let ups = on_ack(&mut fs, 1, TimeNs(3000), &c, TimeNs(9000));
        assert_eq!(ups[0].effective_at, TimeNs(9001));
    }

    /// Ack sequence (new, dup, dup, dup) requests exactly one
    /// retransmission slot and requeues exactly one packet.
    #[test]
    fn triple_duplicate_ack_triggers_one_fast_retransmit() {
        let c = cfg();
        let mut fs = FlowState::with_cwnd(FlowId(1), 10);
        for seq in 0..4 {
            let payload = vec![seq as u8 + 1; 10];
            fs.sent_unacked
                .push_back(Packet::data(FlowId(1), seq, payload, TimeNs(0), &c).unwrap());
        }

        let mut all = Vec::new();
        all.extend(on_ack(&mut fs, 1, TimeNs(1000), &c, TimeNs(0)));
        all.extend(on_ack(&mut fs, 1, TimeNs(1100), &c, TimeNs(1500)));
        all.extend(on_ack(&mut fs, 1, TimeNs(1200), &c, TimeNs(1500)));
        all.extend(on_ack(&mut fs, 1, TimeNs(1300), &c, TimeNs(1500)));
        // Three more duplicates at the same value: the hole is already
        // being repaired, so nothing new may be requested.
        all.extend(on_ack(&mut fs, 1, TimeNs(1400), &c, TimeNs(1800)));
        all.extend(on_ack(&mut fs, 1, TimeNs(1500), &c, TimeNs(1800)));
        all.extend(on_ack(&mut fs, 1, TimeNs(1600), &c, TimeNs(1800)));

        let extends: Vec<_> = all
            .iter()
            .filter(|u| matches!(u.event, UpdateEvent::ExtendOne))
            .collect();
        assert_eq!(extends.len(), 1);
        assert_eq!(extends[0].effective_at, TimeNs(1800));
        assert!(extends[0].effective_at >= TimeNs(1300) + c.delta);

        // The retransmit reuses the original packet: seq 1, original bytes.
        assert_eq!(fs.pkt_queue.len(), 1);
        assert_eq!(fs.pkt_queue[0].seq, 1);
        assert_eq!(fs.pkt_queue[0].payload, vec![2u8; 10]);
        assert!(fs.pkt_queue_ascending());
    }

    /// Two timer expiries in a row request two slots, each at least
    /// `delta` after its own fire time, but requeue only one copy.
    #[test]
    fn back_to_back_timeouts() {
        let c = cfg();
        let mut fs = FlowState::with_cwnd(FlowId(1), 10);
        fs.sent_unacked
            .push_back(Packet::data(FlowId(1), 5, vec![0xaa; 20], TimeNs(0), &c).unwrap());

        let first = on_timeout(&mut fs, TimeNs(2000), &c, TimeNs(0));
        let second = on_timeout(&mut fs, TimeNs(4000), &c, TimeNs(2500));
        assert_eq!(first.len(), 1);
        assert_eq!(second.len(), 1);
        assert_eq!(first[0].effective_at, TimeNs(2500));
        assert_eq!(second[0].effective_at, TimeNs(4500));
        assert!(first[0].effective_at >= TimeNs(2000) + c.delta);
        assert!(second[0].effective_at >= TimeNs(4000) + c.delta);
        assert_eq!(fs.pkt_queue.len(), 1);
        assert_eq!(fs.pkt_queue[0].seq, 5);

        // No unacked data, no timer action.
        fs.sent_unacked.clear();
        fs.pkt_queue.clear();
        assert!(on_timeout(&mut fs, TimeNs(6000), &c, TimeNs(4500)).is_empty());
    }

    #[test]
    fn indicator_requests_a_custom_extension() {
        let c = cfg();
        let mut log = EventLog::default();
        let mut fs = FlowState::new(FlowId(2));
        let u = indicate(&mut fs, 7, TimeNs(1000), &c, TimeNs(0), &mut log);
        assert_eq!(u.event, UpdateEvent::Install { sid: 7, anchor: None });
        assert_eq!(u.effective_at, TimeNs(1500));
        assert_eq!(log.records[0].event, LogEventKind::Indicator);
        assert_eq!(log.records[0].arg, 7);
    }

    #[test]
    fn window_raises_gate_on_their_effective_time() {
        let mut fs = FlowState::with_cwnd(FlowId(1), 4);
        fs.cwnd_raises.push((TimeNs(1000), 8));
        fs.cwnd_raises.push((TimeNs(2000), 12));
        assert_eq!(fs.effective_cwnd_edge(TimeNs(999)), 4);
        assert_eq!(fs.effective_cwnd_edge(TimeNs(1000)), 8);
        assert_eq!(fs.effective_cwnd_edge(TimeNs(1999)), 8);
        assert_eq!(fs.effective_cwnd_edge(TimeNs(2000)), 12);
    }

    #[test]
    fn event_log_csv_round_trip() {
        let mut log = EventLog::default();
        log.push(LogRecord { ts: TimeNs(10), flow: FlowId(1), event: LogEventKind::InPkt, arg: 1500 });
        log.push(LogRecord { ts: TimeNs(20), flow: FlowId(1), event: LogEventKind::Indicator, arg: 3 });
        log.push(LogRecord { ts: TimeNs(30), flow: FlowId(2), event: LogEventKind::OutReady, arg: 777 });
        let csv = log.to_csv();
        assert_eq!(csv, "10,1,in_pkt,1500\n20,1,indicator,3\n30,2,out_ready,777\n");
        assert_eq!(EventLog::parse_csv(&csv).unwrap(), log);

        let err = EventLog::parse_csv("10,1,bogus,0\n").unwrap_err();
        assert_eq!(err.line, 1);
    }

    proptest! {
        /// The packetization arithmetic is exactly min(queued, rwnd,
        /// m_payload), with zero meaning a dummy.
        #[test]
        fn take_is_the_min_of_three(
            queued in 0usize..4000,
            rwnd in 0u64..4000,
        ) {
            let c = cfg();
            let mut fs = FlowState::new(FlowId(1));
            fs.rwnd = rwnd;
            fs.outbound.extend(std::iter::repeat_n(0x5au8, queued));
            let p = make_next_packet(&mut fs, &c, TimeNs(0));
            let expect = (queued as u64).min(rwnd).min(u64::from(c.m_payload));
            if expect == 0 {
                prop_assert_eq!(p.kind, PacketKind::Dummy);
                prop_assert_eq!(p.pad_len, c.m_payload);
            } else {
                prop_assert_eq!(p.kind, PacketKind::Payload);
                prop_assert_eq!(p.payload.len() as u64, expect);
                prop_assert_eq!(u64::from(p.pad_len), u64::from(c.m_payload) - expect);
            }
            prop_assert_eq!(p.wire_size, c.mtu);
        }

        /// Pad, serialize, strip: the reassembled byte stream is the
        /// original application stream for any split into packets.
        #[test]
        fn pad_then_strip_is_identity(seed in 0u64..u64::MAX, len in 1usize..6000) {
            let c = cfg();
            let data: Vec<u8> = (0..len).map(|i| (mix3(seed, i as u64, 0) & 0xff) as u8).collect();
            let mut fs = FlowState::new(FlowId(1));
            let mut log = EventLog::default();
            enqueue_app_data(&mut fs, &data, TimeNs(0), &mut log);
            let mut rebuilt = Vec::new();
            while !fs.outbound.is_empty() {
                let p = make_next_packet(&mut fs, &c, TimeNs(0));
                let region = p.encode_payload_region(&c);
                rebuilt.extend(Packet::decode_payload_region(&region, &c).unwrap());
            }
            prop_assert_eq!(rebuilt, data);
        }
    }
}
