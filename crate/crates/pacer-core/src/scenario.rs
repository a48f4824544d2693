//! Line-oriented scenario files.
//!
//! A scenario is the complete public description of one simulated
//! experiment: timing constants, schedule templates, the inbound event
//! script, loss injections, and the seeds. One file builds either a
//! single runnable [`Configuration`] or, for paired checking, a
//! [`PairSetup`] whose two secrets are drawn per pair from the scenario
//! seed.
//!
//! The format is `key=value`, one per line. Blank lines and lines
//! starting with `#` are skipped. Scalar keys may repeat (the last
//! assignment wins); list keys (`template`, `request`, `congestion`,
//! `loss`) accumulate. All times are ticks.
//!
//! ```text
//! model=tunnel
//! seed=7
//! secret=42
//! steps=300
//! n_flows=2
//! template=2,20640,120,6
//! request=1,240,2
//! request=2,360
//! congestion=1,4800,9600
//! loss=1,3
//! rtt=240
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::engine::{EpochEngine, HandlerDelayModel};
use crate::models::{ReferenceEnv, ReferenceGuest, TunnelEnv, TunnelGuest};
use crate::noninterference::PairSetup;
use crate::schedule::{ScheduleDb, ScheduleTemplate};
use crate::simnet::{Configuration, InboundEvent, InboundKind};
use crate::tunnel::FlowState;
use crate::types::{mix3, FlowId, FormatError, PacerConfig, TimeNs};

/// Which environment/guest pair the scenario drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Request-scripted guest that drips secret-sized payloads; the
    /// environment only observes. This is the pair the relational
    /// checker runs.
    Reference,
    /// Loopback transport with acks, losses, retransmission and flow
    /// control on top of the same engine.
    Tunnel,
}

/// A parsed scenario, every default resolved.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: ModelKind,
    pub cfg: PacerConfig,
    /// Seeds the shared handler-delay stream and, for paired runs, the
    /// per-pair secrets.
    pub seed: u64,
    /// Secret tag for a single run. Paired runs ignore it and draw
    /// their own.
    pub secret: u64,
    pub steps: u64,
    /// Ack round-trip of the tunnel environment.
    pub rtt: TimeNs,
    /// Retransmission timer of the tunnel guest, in epochs.
    pub rto_epochs: u64,
    /// Response burst length of the tunnel guest, in payload chunks.
    pub response_packets: u64,
    /// Initial congestion-window edge override, in wire packets.
    pub init_cwnd: Option<u64>,
    pub templates: Vec<ScheduleTemplate>,
    pub script: Vec<InboundEvent>,
    /// `(flow, k)`: drop that flow's k-th emission, counting from 0.
    pub losses: BTreeSet<(u32, u64)>,
}

fn err(line: usize, msg: impl Into<String>) -> FormatError {
    FormatError { line, msg: msg.into() }
}

fn parse_num(s: &str, line: usize, key: &str) -> Result<u64, FormatError> {
    s.trim()
        .parse::<u64>()
        .map_err(|_| err(line, format!("{key}: expected an unsigned integer, got {s:?}")))
}

/// Split a list value into exactly `want` or `want + optional` fields.
fn fields<'a>(
    v: &'a str,
    line: usize,
    key: &str,
    min: usize,
    max: usize,
) -> Result<Vec<&'a str>, FormatError> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() < min || parts.len() > max {
        return Err(err(
            line,
            format!("{key}: expected {min}..={max} comma-separated fields, got {}", parts.len()),
        ));
    }
    Ok(parts)
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, FormatError> {
        // Raw key=value pass. Config fields are collected first because
        // template validation needs the final delta, which any later
        // line may still change.
        let mut model = ModelKind::Reference;
        let mut seed = 0u64;
        let mut secret = 0u64;
        let mut steps = 50u64;
        let mut n_flows = 1u32;
        let mut epsilon: Option<u64> = None;
        let mut delta_xmit: Option<u64> = None;
        let mut delta_delay: Option<u64> = None;
        let mut batch_max: Option<u64> = None;
        let mut mtu: Option<u64> = None;
        let mut m_payload: Option<u64> = None;
        let mut rtt: Option<u64> = None;
        let mut rto_epochs = 12u64;
        let mut response_packets = 4u64;
        let mut init_cwnd: Option<u64> = None;
        // (line, parsed) so the second pass can still point at the
        // offending line.
        let mut templates: Vec<(usize, ScheduleTemplate)> = Vec::new();
        let mut script_raw: Vec<(usize, InboundEvent)> = Vec::new();
        let mut losses = BTreeSet::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(err(line, format!("expected key=value, got {trimmed:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "model" => {
                    model = match value {
                        "reference" => ModelKind::Reference,
                        "tunnel" => ModelKind::Tunnel,
                        other => {
                            return Err(err(
                                line,
                                format!("model: expected reference or tunnel, got {other:?}"),
                            ))
                        }
                    };
                }
                "seed" => seed = parse_num(value, line, key)?,
                "secret" => secret = parse_num(value, line, key)?,
                "steps" => steps = parse_num(value, line, key)?,
                "n_flows" => {
                    n_flows = u32::try_from(parse_num(value, line, key)?)
                        .map_err(|_| err(line, "n_flows: out of range"))?;
                }
                "epsilon" => epsilon = Some(parse_num(value, line, key)?),
                "delta_xmit" => delta_xmit = Some(parse_num(value, line, key)?),
                "delta_delay" => delta_delay = Some(parse_num(value, line, key)?),
                "batch_max" => batch_max = Some(parse_num(value, line, key)?),
                "mtu" => mtu = Some(parse_num(value, line, key)?),
                "m_payload" => m_payload = Some(parse_num(value, line, key)?),
                "rtt" => rtt = Some(parse_num(value, line, key)?),
                "rto_epochs" => rto_epochs = parse_num(value, line, key)?,
                "response_packets" => response_packets = parse_num(value, line, key)?,
                "init_cwnd" => init_cwnd = Some(parse_num(value, line, key)?),
                "template" => {
                    let f = fields(value, line, key, 4, 4)?;
                    let sid = u32::try_from(parse_num(f[0], line, key)?)
                        .map_err(|_| err(line, "template: sid out of range"))?;
                    templates.push((
                        line,
                        ScheduleTemplate {
                            sid,
                            initial_delay: TimeNs(parse_num(f[1], line, key)?),
                            spacing: TimeNs(parse_num(f[2], line, key)?),
                            count: u32::try_from(parse_num(f[3], line, key)?)
                                .map_err(|_| err(line, "template: count out of range"))?,
                        },
                    ));
                }
                "request" => {
                    let f = fields(value, line, key, 2, 3)?;
                    let flow = u32::try_from(parse_num(f[0], line, key)?)
                        .map_err(|_| err(line, "request: flow out of range"))?;
                    let time = TimeNs(parse_num(f[1], line, key)?);
                    let sid = match f.get(2) {
                        Some(s) => Some(
                            u32::try_from(parse_num(s, line, key)?)
                                .map_err(|_| err(line, "request: sid out of range"))?,
                        ),
                        None => None,
                    };
                    script_raw.push((
                        line,
                        InboundEvent {
                            flow: FlowId(flow),
                            time,
                            kind: InboundKind::Request { sid },
                        },
                    ));
                }
                "congestion" => {
                    let f = fields(value, line, key, 3, 3)?;
                    let flow = u32::try_from(parse_num(f[0], line, key)?)
                        .map_err(|_| err(line, "congestion: flow out of range"))?;
                    let pause = parse_num(f[1], line, key)?;
                    let resume = parse_num(f[2], line, key)?;
                    if resume <= pause {
                        return Err(err(line, "congestion: resume must come after pause"));
                    }
                    script_raw.push((
                        line,
                        InboundEvent {
                            flow: FlowId(flow),
                            time: TimeNs(pause),
                            kind: InboundKind::CongestionPause,
                        },
                    ));
                    script_raw.push((
                        line,
                        InboundEvent {
                            flow: FlowId(flow),
                            time: TimeNs(resume),
                            kind: InboundKind::CongestionResume,
                        },
                    ));
                }
                "loss" => {
                    let f = fields(value, line, key, 2, 2)?;
                    let flow = u32::try_from(parse_num(f[0], line, key)?)
                        .map_err(|_| err(line, "loss: flow out of range"))?;
                    losses.insert((flow, parse_num(f[1], line, key)?));
                }
                other => return Err(err(line, format!("unknown key {other:?}"))),
            }
        }

        // Resolve the config, then everything that depends on it.
        let base = PacerConfig::production_micros(1);
        let cfg = PacerConfig::new(
            TimeNs(epsilon.unwrap_or(base.epsilon.0)),
            TimeNs(delta_xmit.unwrap_or(base.delta_xmit.0)),
            TimeNs(delta_delay.unwrap_or(base.delta_delay.0)),
            batch_max
                .unwrap_or(u64::from(base.batch_max))
                .try_into()
                .map_err(|_| err(0, "batch_max: out of range"))?,
            mtu.unwrap_or(u64::from(base.mtu))
                .try_into()
                .map_err(|_| err(0, "mtu: out of range"))?,
            m_payload
                .unwrap_or(u64::from(base.m_payload))
                .try_into()
                .map_err(|_| err(0, "m_payload: out of range"))?,
            n_flows,
        )
        .map_err(|e| err(0, e.to_string()))?;

        for (line, t) in &templates {
            t.validate(&cfg).map_err(|e| err(*line, e.to_string()))?;
        }
        let known: BTreeSet<u32> = templates.iter().map(|(_, t)| t.sid).collect();
        for (line, ev) in &script_raw {
            if ev.flow.0 == 0 || ev.flow.0 > n_flows {
                return Err(err(
                    *line,
                    format!("flow {} outside 1..={n_flows}", ev.flow.0),
                ));
            }
            if ev.time.0 == 0 {
                return Err(err(*line, "event time must be positive"));
            }
            if let InboundKind::Request { sid: Some(sid) } = ev.kind {
                if sid != 0 && !known.contains(&sid) {
                    return Err(err(*line, format!("request names undeclared template {sid}")));
                }
            }
        }
        for (flow, _) in &losses {
            if *flow == 0 || *flow > n_flows {
                return Err(err(0, format!("loss flow {flow} outside 1..={n_flows}")));
            }
        }

        Ok(Scenario {
            model,
            rtt: TimeNs(rtt.unwrap_or(cfg.epsilon.0 * 2)),
            cfg,
            seed,
            secret,
            steps,
            rto_epochs,
            response_packets,
            init_cwnd,
            templates: templates.into_iter().map(|(_, t)| t).collect(),
            script: script_raw.into_iter().map(|(_, ev)| ev).collect(),
            losses,
        })
    }

    /// Render back to the file format. `parse(render(s))` rebuilds `s`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let model = match self.model {
            ModelKind::Reference => "reference",
            ModelKind::Tunnel => "tunnel",
        };
        let _ = writeln!(out, "model={model}");
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "secret={}", self.secret);
        let _ = writeln!(out, "steps={}", self.steps);
        let _ = writeln!(out, "n_flows={}", self.cfg.n_flows);
        let _ = writeln!(out, "epsilon={}", self.cfg.epsilon.0);
        let _ = writeln!(out, "delta_xmit={}", self.cfg.delta_xmit.0);
        let _ = writeln!(out, "delta_delay={}", self.cfg.delta_delay.0);
        let _ = writeln!(out, "batch_max={}", self.cfg.batch_max);
        let _ = writeln!(out, "mtu={}", self.cfg.mtu);
        let _ = writeln!(out, "m_payload={}", self.cfg.m_payload);
        let _ = writeln!(out, "rtt={}", self.rtt.0);
        let _ = writeln!(out, "rto_epochs={}", self.rto_epochs);
        let _ = writeln!(out, "response_packets={}", self.response_packets);
        if let Some(cw) = self.init_cwnd {
            let _ = writeln!(out, "init_cwnd={cw}");
        }
        for t in &self.templates {
            let _ = writeln!(
                out,
                "template={},{},{},{}",
                t.sid, t.initial_delay.0, t.spacing.0, t.count
            );
        }
        for ev in &self.script {
            match ev.kind {
                InboundKind::Request { sid: Some(sid) } => {
                    let _ = writeln!(out, "request={},{},{sid}", ev.flow.0, ev.time.0);
                }
                InboundKind::Request { sid: None } => {
                    let _ = writeln!(out, "request={},{}", ev.flow.0, ev.time.0);
                }
                // Pause/resume pairs are emitted by the congestion key;
                // render each half on its own line is not parseable, so
                // pair them back up below.
                InboundKind::CongestionPause | InboundKind::CongestionResume => {}
                InboundKind::Ack { .. } => {}
            }
        }
        let mut pauses: Vec<(u32, u64)> = Vec::new();
        for ev in &self.script {
            match ev.kind {
                InboundKind::CongestionPause => pauses.push((ev.flow.0, ev.time.0)),
                InboundKind::CongestionResume => {
                    if let Some(pos) = pauses.iter().position(|(f, _)| *f == ev.flow.0) {
                        let (flow, pause) = pauses.remove(pos);
                        let _ = writeln!(out, "congestion={flow},{pause},{}", ev.time.0);
                    }
                }
                _ => {}
            }
        }
        for (flow, k) in &self.losses {
            let _ = writeln!(out, "loss={flow},{k}");
        }
        out
    }

    fn build_engine(&self) -> EpochEngine {
        let mut db = ScheduleDb::new(&self.cfg);
        for t in &self.templates {
            db.insert(t.clone(), &self.cfg).expect("validated at parse time");
        }
        let mut engine = EpochEngine::new(self.cfg.clone(), db);
        engine.delay_model = HandlerDelayModel::PerEpoch {
            seed: mix3(self.seed, 0, 0xd31a),
            bound: self.cfg.delta_xmit,
        };
        for f in 1..=self.cfg.n_flows {
            let fs = match self.init_cwnd {
                Some(edge) => FlowState::with_cwnd(FlowId(f), edge),
                None => FlowState::new(FlowId(f)),
            };
            engine.add_flow(fs);
        }
        engine
    }

    /// Assemble the runnable system this scenario describes.
    pub fn build(&self) -> Configuration {
        let engine = self.build_engine();
        match self.model {
            ModelKind::Reference => Configuration::new(
                engine,
                Box::new(ReferenceEnv::new(self.script.clone())),
                Box::new(ReferenceGuest::new(self.secret)),
            ),
            ModelKind::Tunnel => Configuration::new(
                engine,
                Box::new(TunnelEnv::new(self.script.clone(), self.rtt, self.losses.clone())),
                Box::new(TunnelGuest::new(
                    self.secret,
                    self.response_packets,
                    self.rto_epochs,
                )),
            ),
        }
    }

    /// Public setup for the `pair_index`-th paired check of this
    /// scenario. The two secrets and the handler-delay seed are drawn
    /// from the scenario seed, so a pair index is reproducible on its
    /// own. Paired checks always run the reference models; `model` and
    /// the tunnel knobs are ignored.
    pub fn pair_setup(&self, pair_index: u64) -> PairSetup {
        PairSetup {
            cfg: self.cfg.clone(),
            templates: self.templates.clone(),
            script: self.script.clone(),
            steps: self.steps,
            delay_seed: mix3(self.seed, pair_index, 17),
            secret_a: mix3(self.seed, pair_index, 11),
            secret_b: mix3(self.seed, pair_index, 13),
        }
    }
}
