//! Transmit schedules, schedule templates, and the update queue.
//!
//! A transmit schedule is a calendar of future transmission slots. The
//! emitter fires one packet per slot whether or not payload exists, so the
//! calendar alone determines what the wire shows. The guest steers a
//! schedule exclusively through queued updates, each carrying two
//! timestamps: `queued_at` (when the guest handed it over, possibly
//! secret-dependent) and `effective_at` (the first instant it may alter,
//! always chosen from public data). The emitter applies an update only at
//! an epoch boundary at or after `queued_at`, and application never touches
//! slots at or before `effective_at`. Those two rules together make the
//! hand-over instant unobservable.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::types::{parse_u64, CausalKind, FlowId, FormatError, PacerConfig, Sid, TimeNs, DEFAULT_SID};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("template {sid}: first offset {first} is below the delay floor {delta} (template too eager)")]
    TemplateTooEager { sid: Sid, first: TimeNs, delta: TimeNs },
    #[error("template {sid}: spacing must be positive")]
    ZeroSpacing { sid: Sid },
    #[error("template {sid}: slot count must be positive")]
    ZeroCount { sid: Sid },
    #[error("unknown schedule template {0}")]
    UnknownSid(Sid),
    #[error("update queued at {queued_at} effective at {effective_at} violates queue-before-effect ordering")]
    UpdateOrdering { queued_at: TimeNs, effective_at: TimeNs },
    #[error("update effective at {effective_at} does not exceed the queue high-water mark {temax}")]
    StaleEffectiveTime { effective_at: TimeNs, temax: TimeNs },
    #[error("update effective at {effective_at} would rewrite slots already fired or fixed: {detail}")]
    PrefixViolation { effective_at: TimeNs, detail: String },
    #[error("cannot extend an empty schedule")]
    EmptySchedule,
}

/// A schedule template: `count` slots starting `initial_delay` after the
/// anchor, `spacing` apart. Templates are validated against the delay
/// floor when loaded, so instantiating one can never produce a slot closer
/// than `delta` to its anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleTemplate {
    pub sid: Sid,
    pub initial_delay: TimeNs,
    pub spacing: TimeNs,
    pub count: u32,
}

impl ScheduleTemplate {
    pub fn validate(&self, cfg: &PacerConfig) -> Result<(), ScheduleError> {
        if self.initial_delay < cfg.delta {
            return Err(ScheduleError::TemplateTooEager {
                sid: self.sid,
                first: self.initial_delay,
                delta: cfg.delta,
            });
        }
        if self.spacing.0 == 0 {
            return Err(ScheduleError::ZeroSpacing { sid: self.sid });
        }
        if self.count == 0 {
            return Err(ScheduleError::ZeroCount { sid: self.sid });
        }
        Ok(())
    }

    /// Offsets from the anchor: `initial_delay + k * spacing`.
    pub fn expand(&self) -> Vec<TimeNs> {
        (0..u64::from(self.count))
            .map(|k| self.initial_delay + self.spacing * k)
            .collect()
    }
}

/// The template store. The default template (sid 0) always exists: a
/// freshly built store starts with a built-in one whose first slot sits on
/// the first epoch boundary strictly after the delay floor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleDb {
    templates: BTreeMap<Sid, ScheduleTemplate>,
}

impl ScheduleDb {
    pub fn new(cfg: &PacerConfig) -> ScheduleDb {
        let mut templates = BTreeMap::new();
        let d = Self::builtin_default(cfg);
        templates.insert(d.sid, d);
        ScheduleDb { templates }
    }

    /// The built-in default: first slot on the first epoch boundary
    /// strictly above `delta`, then one slot per epoch, 16 slots.
    pub fn builtin_default(cfg: &PacerConfig) -> ScheduleTemplate {
        let steps = cfg.delta.0 / cfg.epsilon.0 + 1;
        ScheduleTemplate {
            sid: DEFAULT_SID,
            initial_delay: cfg.epsilon * steps,
            spacing: cfg.epsilon,
            count: 16,
        }
    }

    pub fn insert(&mut self, tmpl: ScheduleTemplate, cfg: &PacerConfig) -> Result<(), ScheduleError> {
        tmpl.validate(cfg)?;
        self.templates.insert(tmpl.sid, tmpl);
        Ok(())
    }

    pub fn get(&self, sid: Sid) -> Option<&ScheduleTemplate> {
        self.templates.get(&sid)
    }

    pub fn sids(&self) -> impl Iterator<Item = Sid> + '_ {
        self.templates.keys().copied()
    }

    /// Instantiate a template with its slots anchored at `anchor`.
    pub fn instantiate(&self, sid: Sid, anchor: TimeNs) -> Result<TransmitSchedule, ScheduleError> {
        let tmpl = self.templates.get(&sid).ok_or(ScheduleError::UnknownSid(sid))?;
        Ok(TransmitSchedule {
            sid,
            anchor,
            offsets: tmpl.expand(),
            cursor: 0,
            paused_at: None,
            pause_shift: TimeNs::ZERO,
            spacing: tmpl.spacing,
        })
    }

    /// One `sid,initial_delay_ns,spacing_ns,count` line per template.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for t in self.templates.values() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                t.sid, t.initial_delay, t.spacing, t.count
            ));
        }
        out
    }

    /// Parse a template file. Parsed templates are validated against the
    /// delay floor; the built-in default is kept unless the file overrides
    /// sid 0, so the reserved default always resolves.
    pub fn parse_csv(text: &str, cfg: &PacerConfig) -> Result<ScheduleDb, DbParseError> {
        let mut db = ScheduleDb::new(cfg);
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(DbParseError::Format(FormatError {
                    line: idx + 1,
                    msg: format!("expected 4 fields, got {}", fields.len()),
                }));
            }
            let tmpl = ScheduleTemplate {
                sid: parse_u64(fields[0], idx + 1).map_err(DbParseError::Format)? as Sid,
                initial_delay: TimeNs(parse_u64(fields[1], idx + 1).map_err(DbParseError::Format)?),
                spacing: TimeNs(parse_u64(fields[2], idx + 1).map_err(DbParseError::Format)?),
                count: parse_u64(fields[3], idx + 1).map_err(DbParseError::Format)? as u32,
            };
            db.insert(tmpl, cfg).map_err(DbParseError::Schedule)?;
        }
        Ok(db)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DbParseError {
    #[error(transparent)]
    Format(FormatError),
    #[error(transparent)]
    Schedule(ScheduleError),
}

/// Instantiate the reserved default template anchored at a request's
/// arrival time. The template's delay-floor validation guarantees the
/// first slot fires no earlier than `arrival + delta`.
pub fn instantiate_default(
    db: &ScheduleDb,
    _flow: FlowId,
    arrival: TimeNs,
) -> Result<TransmitSchedule, ScheduleError> {
    db.instantiate(DEFAULT_SID, arrival)
}

/// The active calendar of one flow.
///
/// Slot `k` fires at `anchor + offsets[k]`; `cursor` indexes the next
/// unfired slot. While paused (`paused_at = Some(p)`), slots after `p`
/// are deferred and fire only after a resume, which shifts them by the
/// paused duration rounded up to a whole number of epochs.
/// `pause_shift` accumulates every postponement ever applied, both from
/// resumes and from epoch-wise deferral while the congestion window is
/// closed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransmitSchedule {
    pub sid: Sid,
    pub anchor: TimeNs,
    pub offsets: Vec<TimeNs>,
    pub cursor: usize,
    pub paused_at: Option<TimeNs>,
    pub pause_shift: TimeNs,
    /// Inter-slot spacing inherited from the template, used when a single
    /// slot is appended.
    pub spacing: TimeNs,
}

impl TransmitSchedule {
    /// A schedule with no slots. Inactive flows carry one of these; it
    /// emits nothing.
    pub fn empty() -> TransmitSchedule {
        TransmitSchedule {
            sid: DEFAULT_SID,
            anchor: TimeNs::ZERO,
            offsets: Vec::new(),
            cursor: 0,
            paused_at: None,
            pause_shift: TimeNs::ZERO,
            spacing: TimeNs::ZERO,
        }
    }

    pub fn is_paused(&self) -> bool {
        self.paused_at.is_some()
    }

    pub fn slot_time(&self, k: usize) -> TimeNs {
        self.anchor + self.offsets[k]
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Absolute time of the next unfired slot, ignoring pause state.
    pub fn next_slot_time(&self) -> Option<TimeNs> {
        (self.cursor < self.offsets.len()).then(|| self.slot_time(self.cursor))
    }

    /// Whether a slot at time `t` is currently deferred by a pause.
    pub fn blocked_at(&self, t: TimeNs) -> bool {
        matches!(self.paused_at, Some(p) if t > p)
    }

    /// Next unfired slot that a pause does not defer.
    pub fn next_fireable_slot(&self) -> Option<TimeNs> {
        let t = self.next_slot_time()?;
        (!self.blocked_at(t)).then_some(t)
    }

    pub fn fire_next(&mut self) {
        debug_assert!(self.cursor < self.offsets.len());
        self.cursor += 1;
    }

    pub fn all_times(&self) -> Vec<TimeNs> {
        (0..self.offsets.len()).map(|k| self.slot_time(k)).collect()
    }

    /// The firing calendar restricted to `(0, t]`: every slot that fires
    /// at or before `t` under the current pause state. This is the view
    /// updates must never change for `t` before their effective time.
    pub fn restriction(&self, t: TimeNs) -> Vec<TimeNs> {
        let bound = match self.paused_at {
            Some(p) if p < t => p,
            _ => t,
        };
        self.all_times().into_iter().filter(|s| *s <= bound).collect()
    }

    /// Shift every unfired slot forward, regardless of pause state. Used
    /// for epoch-wise postponement while the congestion window is closed.
    pub fn shift_unfired(&mut self, shift: TimeNs) {
        for k in self.cursor..self.offsets.len() {
            self.offsets[k] += shift;
        }
        self.pause_shift += shift;
    }

    fn shift_unfired_after(&mut self, after: TimeNs, shift: TimeNs) {
        for k in self.cursor..self.offsets.len() {
            if self.slot_time(k) > after {
                self.offsets[k] += shift;
            }
        }
        self.pause_shift += shift;
    }

    /// Construction invariants: strictly ascending slots, cursor in range.
    pub fn validate(&self) -> bool {
        self.cursor <= self.offsets.len()
            && self.offsets.windows(2).all(|w| w[0] < w[1])
    }

    fn fired_after(&self, t: TimeNs) -> Option<TimeNs> {
        (0..self.cursor)
            .map(|k| self.slot_time(k))
            .find(|s| *s > t)
    }
}

/// What an update does once applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpdateEvent {
    /// Splice a template in after the effective time: slots at or before
    /// it stay, later slots are replaced by the template's. `anchor`
    /// chooses where the new slots are measured from; `None` anchors them
    /// at the effective time (the custom-extension case), `Some(t)`
    /// anchors at `t` (the request-anchored instantiation case).
    Install { sid: Sid, anchor: Option<TimeNs> },
    /// Defer every slot after the effective time until a resume.
    Pause,
    /// Lift a pause, shifting deferred slots by the paused duration
    /// rounded up to whole epochs, and raise the emitter-visible
    /// congestion window edge to `cwnd_edge`. The raise is gated on the
    /// effective time as well, so a reopened window never enables a
    /// transmission earlier than the floor allows.
    Resume { cwnd_edge: u64 },
    /// Append one slot after the last, one spacing later.
    ExtendOne,
    /// Swap the whole calendar for a template at the original anchor.
    /// Valid only if old and new calendars agree on every slot at or
    /// before the effective time.
    Replace { sid: Sid },
}

/// One queued schedule update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleUpdate {
    /// When the guest handed the update over. May be secret-dependent;
    /// never influences anything except how long the update waits.
    pub queued_at: TimeNs,
    pub event: UpdateEvent,
    /// First instant the update may alter. Chosen from public data.
    pub effective_at: TimeNs,
    /// The inbound event that caused this update, if any, for causal
    /// floor accounting.
    pub cause: Option<(CausalKind, TimeNs)>,
}

impl ScheduleUpdate {
    /// The projection used in equivalence checks: what the update does
    /// and when it takes effect, with the hand-over time dropped.
    pub fn projection(&self) -> (UpdateEvent, TimeNs) {
        (self.event.clone(), self.effective_at)
    }
}

/// Per-flow pending updates plus the global effective-time high-water
/// mark. Enqueueing requires a strictly increasing effective time, so
/// each flow's pending list is sorted by construction and ties cannot
/// arise; updates apply in queue order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UpdateQueue {
    per_flow: BTreeMap<FlowId, Vec<ScheduleUpdate>>,
    pub temax: TimeNs,
}

impl UpdateQueue {
    pub fn new() -> UpdateQueue {
        UpdateQueue::default()
    }

    /// Queue an update. Rejects hand-over after effect (`queued_at >
    /// effective_at`) and effective times at or below the high-water
    /// mark.
    pub fn enqueue(&mut self, flow: FlowId, upd: ScheduleUpdate) -> Result<(), ScheduleError> {
        if upd.queued_at > upd.effective_at {
            return Err(ScheduleError::UpdateOrdering {
                queued_at: upd.queued_at,
                effective_at: upd.effective_at,
            });
        }
        if upd.effective_at <= self.temax {
            return Err(ScheduleError::StaleEffectiveTime {
                effective_at: upd.effective_at,
                temax: self.temax,
            });
        }
        self.temax = upd.effective_at;
        self.per_flow.entry(flow).or_default().push(upd);
        Ok(())
    }

    pub fn pending(&self, flow: FlowId) -> &[ScheduleUpdate] {
        self.per_flow.get(&flow).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn pending_mut(&mut self, flow: FlowId) -> &mut Vec<ScheduleUpdate> {
        self.per_flow.entry(flow).or_default()
    }

    pub fn flows(&self) -> impl Iterator<Item = FlowId> + '_ {
        self.per_flow.keys().copied()
    }

    /// Hand-over precedes effect on every pending update (checked at
    /// enqueue, re-verifiable at any step boundary).
    pub fn holds_queue_before_effect(&self) -> bool {
        self.per_flow
            .values()
            .flatten()
            .all(|u| u.queued_at <= u.effective_at)
    }

    /// No pending effective time exceeds the high-water mark.
    pub fn holds_high_water_mark(&self) -> bool {
        self.per_flow
            .values()
            .flatten()
            .all(|u| u.effective_at <= self.temax)
    }
}

/// Apply one update to a schedule. Fails rather than rewrite history:
/// slots that already fired, and more generally the firing calendar at or
/// before the update's effective time, come out unchanged.
pub fn apply_update(
    db: &ScheduleDb,
    cfg: &PacerConfig,
    sched: &mut TransmitSchedule,
    upd: &ScheduleUpdate,
) -> Result<(), ScheduleError> {
    let te = upd.effective_at;
    match &upd.event {
        UpdateEvent::Pause => {
            // A second pause while paused keeps the earlier pause point.
            if sched.paused_at.is_none() {
                sched.paused_at = Some(te);
            }
        }
        UpdateEvent::Resume { .. } => {
            // Resuming an unpaused schedule only raises the window edge,
            // which the emitter handles; the calendar is untouched.
            if let Some(p) = sched.paused_at {
                if te < p {
                    return Err(ScheduleError::UpdateOrdering {
                        queued_at: upd.queued_at,
                        effective_at: te,
                    });
                }
                let shift = (te - p).round_up_to(cfg.epsilon);
                if shift > TimeNs::ZERO {
                    sched.shift_unfired_after(p, shift);
                }
                sched.paused_at = None;
            }
        }
        UpdateEvent::ExtendOne => {
            let Some(last) = sched.offsets.last().copied() else {
                return Err(ScheduleError::EmptySchedule);
            };
            let last_time = sched.anchor + last;
            let candidate = last_time + sched.spacing;
            let new_time = if candidate > te { candidate } else { te + sched.spacing };
            sched.offsets.push(new_time - sched.anchor);
        }
        UpdateEvent::Install { sid, anchor } => {
            let tmpl = db.get(*sid).ok_or(ScheduleError::UnknownSid(*sid))?;
            if let Some(fired) = sched.fired_after(te) {
                return Err(ScheduleError::PrefixViolation {
                    effective_at: te,
                    detail: format!("slot at {fired} already fired"),
                });
            }
            let base = anchor.unwrap_or(te);
            let new_times: Vec<TimeNs> = tmpl.expand().into_iter().map(|o| base + o).collect();
            if let Some(first) = new_times.first() {
                if *first <= te {
                    return Err(ScheduleError::PrefixViolation {
                        effective_at: te,
                        detail: format!("spliced slot at {first} not after effective time"),
                    });
                }
                if *first < sched.anchor {
                    return Err(ScheduleError::PrefixViolation {
                        effective_at: te,
                        detail: format!("spliced slot at {first} precedes anchor {}", sched.anchor),
                    });
                }
            }
            // Offsets ascend, so the slots at or before the effective
            // time form a prefix; keep it and replace the tail.
            let anchor = sched.anchor;
            let keep = sched
                .offsets
                .iter()
                .take_while(|o| anchor + **o <= te)
                .count();
            sched.offsets.truncate(keep);
            for t in new_times {
                sched.offsets.push(t - sched.anchor);
            }
            sched.sid = *sid;
            sched.spacing = tmpl.spacing;
        }
        UpdateEvent::Replace { sid } => {
            let tmpl = db.get(*sid).ok_or(ScheduleError::UnknownSid(*sid))?;
            if let Some(fired) = sched.fired_after(te) {
                return Err(ScheduleError::PrefixViolation {
                    effective_at: te,
                    detail: format!("slot at {fired} already fired"),
                });
            }
            let new_offsets = tmpl.expand();
            let old_prefix: Vec<TimeNs> = sched
                .all_times()
                .into_iter()
                .filter(|s| *s <= te)
                .collect();
            let new_prefix: Vec<TimeNs> = new_offsets
                .iter()
                .map(|o| sched.anchor + *o)
                .filter(|s| *s <= te)
                .collect();
            if old_prefix != new_prefix {
                return Err(ScheduleError::PrefixViolation {
                    effective_at: te,
                    detail: format!(
                        "replacement disagrees on the fixed prefix ({} vs {} slots at or before {te})",
                        old_prefix.len(),
                        new_prefix.len()
                    ),
                });
            }
            sched.offsets = new_offsets;
            sched.sid = *sid;
            sched.spacing = tmpl.spacing;
        }
    }
    debug_assert!(sched.validate(), "update left schedule malformed");
    Ok(())
}

/// Apply the pending updates whose hand-over time has passed: the longest
/// prefix with `queued_at <= now`, in queue order. Later updates stay
/// pending even if their own hand-over time has passed, preserving queue
/// order. Returns the applied updates.
pub fn update_prof(
    db: &ScheduleDb,
    cfg: &PacerConfig,
    sched: &mut TransmitSchedule,
    pending: &mut Vec<ScheduleUpdate>,
    now: TimeNs,
) -> Result<Vec<ScheduleUpdate>, ScheduleError> {
    let ready = pending
        .iter()
        .position(|u| u.queued_at > now)
        .unwrap_or(pending.len());
    let applied: Vec<ScheduleUpdate> = pending.drain(..ready).collect();
    for upd in &applied {
        apply_update(db, cfg, sched, upd)?;
    }
    Ok(applied)
}

/// Fold a hand-over-free event sequence over a schedule: the replay
/// primitive used by the relational invariant check. Each element is an
/// update projection (event, effective time).
pub fn apply_event_seq(
    db: &ScheduleDb,
    cfg: &PacerConfig,
    sched: &TransmitSchedule,
    events: &[(UpdateEvent, TimeNs)],
) -> Result<TransmitSchedule, ScheduleError> {
    let mut out = sched.clone();
    for (event, te) in events {
        let upd = ScheduleUpdate {
            queued_at: *te,
            event: event.clone(),
            effective_at: *te,
            cause: None,
        };
        apply_update(db, cfg, &mut out, &upd)?;
    }
    Ok(out)
}
