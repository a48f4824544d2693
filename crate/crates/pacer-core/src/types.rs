//! Core vocabulary: integer time, the shaping configuration, flows,
//! packets, and observation traces.
//!
//! Everything an on-path observer can see of a shaped flow is captured by
//! [`TraceEvent`]: a timestamp, a flow name, and a wire size. The functions
//! here deliberately destroy the rest (payload bytes, padding split,
//! sequence numbers) so that higher layers can state their security checks
//! as plain equality of traces.

use std::fmt;

use thiserror::Error;

/// Integer tick count since simulation start.
///
/// The unit is nominally nanoseconds; simulations conventionally run one
/// tick per microsecond and scale the configuration constants to match.
/// Arithmetic panics on overflow or underflow, it never wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TimeNs(pub u64);

impl TimeNs {
    pub const ZERO: TimeNs = TimeNs(0);

    pub fn checked_add(self, rhs: TimeNs) -> Option<TimeNs> {
        self.0.checked_add(rhs.0).map(TimeNs)
    }

    pub fn checked_sub(self, rhs: TimeNs) -> Option<TimeNs> {
        self.0.checked_sub(rhs.0).map(TimeNs)
    }

    /// Smallest multiple of `step` that is `>= self`. Panics if `step` is
    /// zero or the result overflows.
    pub fn round_up_to(self, step: TimeNs) -> TimeNs {
        assert!(step.0 > 0, "round_up_to: zero step");
        let q = self.0.div_ceil(step.0);
        TimeNs(q.checked_mul(step.0).expect("time overflow"))
    }

    pub fn is_multiple_of(self, step: TimeNs) -> bool {
        step.0 > 0 && self.0 % step.0 == 0
    }
}

impl std::ops::Add for TimeNs {
    type Output = TimeNs;
    fn add(self, rhs: TimeNs) -> TimeNs {
        TimeNs(self.0.checked_add(rhs.0).expect("time overflow"))
    }
}

impl std::ops::Sub for TimeNs {
    type Output = TimeNs;
    fn sub(self, rhs: TimeNs) -> TimeNs {
        TimeNs(self.0.checked_sub(rhs.0).expect("time underflow"))
    }
}

impl std::ops::Mul<u64> for TimeNs {
    type Output = TimeNs;
    fn mul(self, rhs: u64) -> TimeNs {
        TimeNs(self.0.checked_mul(rhs).expect("time overflow"))
    }
}

impl std::ops::AddAssign for TimeNs {
    fn add_assign(&mut self, rhs: TimeNs) {
        *self = *self + rhs;
    }
}

impl fmt::Display for TimeNs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Flow name. Flows are numbered `1..=n_flows`; the set is fixed when an
/// emitter is constructed and never changes afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowId(pub u32);

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Schedule template identifier. `DEFAULT_SID` is reserved for the
/// template instantiated on request arrival.
pub type Sid = u32;

/// Reserved identifier of the default schedule template.
pub const DEFAULT_SID: Sid = 0;

/// Length of the in-band padding header carried inside the encrypted
/// payload region of every shaped packet (big-endian pad length).
pub const PAD_HEADER_LEN: usize = 2;

/// Wire size of an unshaped acknowledgment packet. Acknowledgments are
/// paced but never padded, so their size is below the MTU by design.
pub const ACK_WIRE_SIZE: u32 = 52;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("epsilon must be positive")]
    ZeroEpsilon,
    #[error("batch_max must be at least 1")]
    ZeroBatch,
    #[error("n_flows must be at least 1")]
    ZeroFlows,
    #[error("m_payload must be at least 1")]
    ZeroPayload,
    #[error("m_payload {m_payload} plus the {PAD_HEADER_LEN}-byte pad header must fit below mtu {mtu}")]
    PayloadTooLarge { m_payload: u32, mtu: u32 },
    #[error("mtu {0} is too small to carry headers")]
    MtuTooSmall(u32),
}

/// Shaping parameters shared by every component.
///
/// `delta` is always `epsilon + delta_delay`: one emission epoch to absorb
/// batching plus the bound on guest-side processing of an inbound packet
/// or timer. Any transmission caused by an inbound event is scheduled at
/// least `delta` after that event, which is what makes the guest's
/// processing time unobservable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacerConfig {
    /// Emission epoch length. Every emitted timestamp is a multiple of it.
    pub epsilon: TimeNs,
    /// Upper bound on the transmit handler's own execution time.
    pub delta_xmit: TimeNs,
    /// Upper bound on guest-side processing of one inbound packet or timer.
    pub delta_delay: TimeNs,
    /// Causal delay floor, `epsilon + delta_delay`.
    pub delta: TimeNs,
    /// Most packets one epoch may emit across all flows.
    pub batch_max: u32,
    /// Wire size of every shaped packet.
    pub mtu: u32,
    /// Payload capacity of a shaped packet (MTU minus all headers,
    /// including the pad header).
    pub m_payload: u32,
    /// Number of flows, named `1..=n_flows`.
    pub n_flows: u32,
}

impl PacerConfig {
    pub fn new(
        epsilon: TimeNs,
        delta_xmit: TimeNs,
        delta_delay: TimeNs,
        batch_max: u32,
        mtu: u32,
        m_payload: u32,
        n_flows: u32,
    ) -> Result<PacerConfig, ConfigError> {
        if epsilon.0 == 0 {
            return Err(ConfigError::ZeroEpsilon);
        }
        if batch_max == 0 {
            return Err(ConfigError::ZeroBatch);
        }
        if n_flows == 0 {
            return Err(ConfigError::ZeroFlows);
        }
        if m_payload == 0 {
            return Err(ConfigError::ZeroPayload);
        }
        if mtu <= ACK_WIRE_SIZE {
            return Err(ConfigError::MtuTooSmall(mtu));
        }
        if u64::from(m_payload) + PAD_HEADER_LEN as u64 > u64::from(mtu)
            || m_payload > u16::MAX as u32
        {
            return Err(ConfigError::PayloadTooLarge { m_payload, mtu });
        }
        let delta = epsilon
            .checked_add(delta_delay)
            .ok_or(ConfigError::ZeroEpsilon)?;
        Ok(PacerConfig {
            epsilon,
            delta_xmit,
            delta_delay,
            delta,
            batch_max,
            mtu,
            m_payload,
            n_flows,
        })
    }

    /// Production constants at one tick per microsecond: a 120 us epoch,
    /// a 35 us handler bound, a 20 ms guest processing bound, batches of
    /// at most 38 packets, and a 1500-byte MTU carrying 1448 payload
    /// bytes. This is the scale simulations run at.
    pub fn production_micros(n_flows: u32) -> PacerConfig {
        PacerConfig::new(
            TimeNs(120),
            TimeNs(35),
            TimeNs(20_000),
            38,
            1500,
            1448,
            n_flows,
        )
        .expect("builtin constants are valid")
    }

    /// The same constants expressed in nanoseconds.
    pub fn production_nanos(n_flows: u32) -> PacerConfig {
        PacerConfig::new(
            TimeNs(120_000),
            TimeNs(35_000),
            TimeNs(20_000_000),
            38,
            1500,
            1448,
            n_flows,
        )
        .expect("builtin constants are valid")
    }
}

impl Default for PacerConfig {
    fn default() -> Self {
        PacerConfig::production_micros(1)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PacketError {
    #[error("payload length {len} exceeds m_payload {m_payload}")]
    PayloadTooLong { len: usize, m_payload: u32 },
    #[error("payload packets carry at least one byte")]
    EmptyPayload,
    #[error("pad header declares {pad} padding bytes but m_payload is {m_payload}")]
    BadPadHeader { pad: u32, m_payload: u32 },
    #[error("payload region is {len} bytes, expected {expected}")]
    BadRegionLength { len: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PacketKind {
    Payload,
    Dummy,
    Ack,
}

/// One tunnel packet. Shaped packets (payload and dummy) always occupy
/// exactly `mtu` bytes on the wire; the split between payload and padding
/// sits inside the encrypted region and is invisible on path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub flow: FlowId,
    pub seq: u64,
    pub kind: PacketKind,
    pub wire_size: u32,
    pub pad_len: u32,
    pub payload: Vec<u8>,
    /// When the packet was prepared and queued, not when it was sent.
    pub queued_at: TimeNs,
}

impl Packet {
    /// Build a shaped payload packet, padding `payload` up to `m_payload`.
    pub fn data(
        flow: FlowId,
        seq: u64,
        payload: Vec<u8>,
        queued_at: TimeNs,
        cfg: &PacerConfig,
    ) -> Result<Packet, PacketError> {
        if payload.is_empty() {
            return Err(PacketError::EmptyPayload);
        }
        if payload.len() > cfg.m_payload as usize {
            return Err(PacketError::PayloadTooLong {
                len: payload.len(),
                m_payload: cfg.m_payload,
            });
        }
        let pad_len = cfg.m_payload - payload.len() as u32;
        Ok(Packet {
            flow,
            seq,
            kind: PacketKind::Payload,
            wire_size: cfg.mtu,
            pad_len,
            payload,
            queued_at,
        })
    }

    /// Build a shaped dummy packet: all padding, no payload. On the wire
    /// it is indistinguishable from a payload packet.
    pub fn dummy(flow: FlowId, seq: u64, queued_at: TimeNs, cfg: &PacerConfig) -> Packet {
        Packet {
            flow,
            seq,
            kind: PacketKind::Dummy,
            wire_size: cfg.mtu,
            pad_len: cfg.m_payload,
            payload: Vec::new(),
            queued_at,
        }
    }

    /// Build an acknowledgment. Acks are paced but never padded.
    pub fn ack(flow: FlowId, ack_seq: u64, queued_at: TimeNs) -> Packet {
        Packet {
            flow,
            seq: ack_seq,
            kind: PacketKind::Ack,
            wire_size: ACK_WIRE_SIZE,
            pad_len: 0,
            payload: Vec::new(),
            queued_at,
        }
    }

    pub fn is_shaped(&self) -> bool {
        self.kind != PacketKind::Ack
    }

    /// Check the construction invariants against a configuration.
    pub fn check(&self, cfg: &PacerConfig) -> bool {
        match self.kind {
            PacketKind::Payload => {
                self.wire_size == cfg.mtu
                    && !self.payload.is_empty()
                    && self.payload.len() as u32 + self.pad_len == cfg.m_payload
            }
            PacketKind::Dummy => {
                self.wire_size == cfg.mtu
                    && self.payload.is_empty()
                    && self.pad_len == cfg.m_payload
            }
            PacketKind::Ack => self.wire_size < cfg.mtu && self.pad_len == 0,
        }
    }

    /// Serialize the in-band payload region: a 2-byte big-endian pad
    /// length, the payload bytes, then that many zero bytes of padding.
    /// The region has the same length for every shaped packet.
    pub fn encode_payload_region(&self, cfg: &PacerConfig) -> Vec<u8> {
        debug_assert!(self.is_shaped(), "acks carry no padded region");
        let mut out = Vec::with_capacity(PAD_HEADER_LEN + cfg.m_payload as usize);
        out.extend_from_slice(&(self.pad_len as u16).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out.resize(PAD_HEADER_LEN + cfg.m_payload as usize, 0);
        out
    }

    /// Parse a payload region and strip the padding, returning the
    /// original payload bytes (empty for a dummy).
    pub fn decode_payload_region(
        region: &[u8],
        cfg: &PacerConfig,
    ) -> Result<Vec<u8>, PacketError> {
        let expected = PAD_HEADER_LEN + cfg.m_payload as usize;
        if region.len() != expected {
            return Err(PacketError::BadRegionLength {
                len: region.len(),
                expected,
            });
        }
        let pad = u32::from(u16::from_be_bytes([region[0], region[1]]));
        if pad > cfg.m_payload {
            return Err(PacketError::BadPadHeader {
                pad,
                m_payload: cfg.m_payload,
            });
        }
        let take = (cfg.m_payload - pad) as usize;
        Ok(region[PAD_HEADER_LEN..PAD_HEADER_LEN + take].to_vec())
    }
}

/// A packet together with the instant it actually left the emitter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emission {
    pub time: TimeNs,
    pub flow: FlowId,
    pub packet: Packet,
}

impl Emission {
    pub fn new(time: TimeNs, packet: Packet) -> Emission {
        Emission {
            time,
            flow: packet.flow,
            packet,
        }
    }
}

/// What an on-path observer sees of one emission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TraceEvent {
    pub time: TimeNs,
    pub flow: FlowId,
    pub wire_size: u32,
}

/// The observer's view of a whole run: timestamps, flows, and wire sizes,
/// in emission order. Payload, padding split, and sequence numbers are
/// gone by construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObservationTrace {
    pub events: Vec<TraceEvent>,
}

/// Project emitted packets down to what the wire reveals.
pub fn trace_project(emissions: &[Emission]) -> ObservationTrace {
    ObservationTrace {
        events: emissions
            .iter()
            .map(|e| TraceEvent {
                time: e.time,
                flow: e.flow,
                wire_size: e.packet.wire_size,
            })
            .collect(),
    }
}

/// Compare two traces after canonical ordering by (time, flow, wire_size).
/// Wire size participates: a padding leak is a trace difference.
pub fn trace_equal(a: &ObservationTrace, b: &ObservationTrace) -> bool {
    a.canonical() == b.canonical()
}

impl ObservationTrace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn canonical(&self) -> Vec<TraceEvent> {
        let mut v = self.events.clone();
        v.sort();
        v
    }

    /// One `time_ns,flow,wire_size` line per event, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&format!("{},{},{}\n", e.time, e.flow, e.wire_size));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<ObservationTrace, FormatError> {
        let mut events = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let mut field = |name: &str| {
                parts.next().ok_or_else(|| FormatError {
                    line: idx + 1,
                    msg: format!("missing field {name}"),
                })
            };
            let time = parse_u64(field("time_ns")?, idx + 1)?;
            let flow = parse_u64(field("flow")?, idx + 1)?;
            let wire = parse_u64(field("wire_size")?, idx + 1)?;
            if parts.next().is_some() {
                return Err(FormatError {
                    line: idx + 1,
                    msg: "trailing fields".into(),
                });
            }
            events.push(TraceEvent {
                time: TimeNs(time),
                flow: FlowId(flow as u32),
                wire_size: wire as u32,
            });
        }
        Ok(ObservationTrace { events })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct FormatError {
    pub line: usize,
    pub msg: String,
}

pub(crate) fn parse_u64(s: &str, line: usize) -> Result<u64, FormatError> {
    s.trim().parse::<u64>().map_err(|_| FormatError {
        line,
        msg: format!("expected unsigned integer, got {s:?}"),
    })
}

/// Why a reactive transmission was scheduled. Each kind corresponds to one
/// of the causal pacing rules: a fresh request instantiates a schedule, an
/// acknowledgment reopens the congestion window or triggers a fast
/// retransmit, and a timer expiry triggers a timeout retransmit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CausalKind {
    RequestArrival,
    AckEnable,
    TimerRetransmit,
}

/// A keyed 64-bit mixer (splitmix64 finalizer). Used wherever a component
/// needs a deterministic pseudo-random function of public or secret
/// inputs without pulling in an RNG.
pub(crate) fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub(crate) fn mix3(a: u64, b: u64, c: u64) -> u64 {
    mix64(mix64(mix64(a) ^ b) ^ c)
}
