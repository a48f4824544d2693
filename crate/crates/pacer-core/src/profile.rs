//! Gray-box schedule profiler.
//!
//! Training runs log three kinds of application events per flow: inbound
//! packets, outbound-bytes-ready, and traffic indicators. The profiler
//! cuts those logs into request/response segments, estimates the shape
//! of each indicator class (first-response delay, response spacing,
//! burst length), and turns the estimates into schedule templates that
//! cover the class with a safety margin. The templates go straight into
//! the calendar database, so they are held to the same delay floor as
//! hand-written ones.

use std::collections::BTreeMap;

use crate::schedule::ScheduleTemplate;
use crate::tunnel::{EventLog, LogEventKind};
use crate::types::{FormatError, PacerConfig, Sid, TimeNs, DEFAULT_SID};

/// One request/response exchange cut out of an event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub sid: Sid,
    /// Arrival of the inbound packet (or indicator) that opened the
    /// exchange. Kept for attribution; the estimators only use deltas.
    pub opened_at: TimeNs,
    /// First inbound to first response. Zero when the burst is empty.
    pub d_i: TimeNs,
    /// Gaps between consecutive responses.
    pub d_s: Vec<TimeNs>,
    /// Number of response packets. `p == d_s.len() + 1` whenever `p >= 1`.
    pub p: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProfileError {
    #[error("no samples to take a percentile of")]
    EmptySamples,
    #[error("percentile {0} outside 1..=100")]
    BadPercentile(u32),
    #[error("sid {0}: no segment carries a response burst")]
    NoBursts(Sid),
}

struct OpenSegment {
    sid: Sid,
    opened_at: TimeNs,
    first_resp: Option<TimeNs>,
    last_resp: Option<TimeNs>,
    d_s: Vec<TimeNs>,
    p: u64,
}

impl OpenSegment {
    fn new(sid: Sid, opened_at: TimeNs) -> OpenSegment {
        OpenSegment { sid, opened_at, first_resp: None, last_resp: None, d_s: Vec::new(), p: 0 }
    }

    fn close(self) -> Segment {
        Segment {
            sid: self.sid,
            opened_at: self.opened_at,
            d_i: self.first_resp.map_or(TimeNs::ZERO, |t| t - self.opened_at),
            d_s: self.d_s,
            p: self.p,
        }
    }
}

/// Cut a log into segments, one per exchange per flow.
///
/// An inbound packet opens an exchange under the reserved default sid;
/// an indicator either tags the exchange it lands in (if no response
/// has gone out yet) or delimits a fresh one. Records must be
/// chronological within each flow; the log's global order may
/// interleave flows freely.
pub fn segment_logs(log: &EventLog) -> Result<Vec<Segment>, FormatError> {
    let mut open: BTreeMap<u32, OpenSegment> = BTreeMap::new();
    let mut last_ts: BTreeMap<u32, TimeNs> = BTreeMap::new();
    let mut done: Vec<Segment> = Vec::new();

    for (idx, r) in log.records.iter().enumerate() {
        let flow = r.flow.0;
        if last_ts.get(&flow).is_some_and(|prev| r.ts < *prev) {
            return Err(FormatError {
                line: idx + 1,
                msg: format!("flow {flow} goes back in time at record {}", idx + 1),
            });
        }
        last_ts.insert(flow, r.ts);
        match r.event {
            LogEventKind::InPkt => {
                if let Some(seg) = open.remove(&flow) {
                    done.push(seg.close());
                }
                open.insert(flow, OpenSegment::new(DEFAULT_SID, r.ts));
            }
            LogEventKind::Indicator => {
                let sid = r.arg as Sid;
                match open.get_mut(&flow) {
                    // Tag the exchange the indicator arrived inside of.
                    Some(seg) if seg.p == 0 => seg.sid = sid,
                    // Responses already flowed: the indicator delimits
                    // the next exchange instead.
                    _ => {
                        if let Some(seg) = open.remove(&flow) {
                            done.push(seg.close());
                        }
                        open.insert(flow, OpenSegment::new(sid, r.ts));
                    }
                }
            }
            LogEventKind::OutReady => {
                let seg = open
                    .entry(flow)
                    .or_insert_with(|| OpenSegment::new(DEFAULT_SID, r.ts));
                seg.p += 1;
                match seg.last_resp {
                    None => seg.first_resp = Some(r.ts),
                    Some(prev) => seg.d_s.push(r.ts - prev),
                }
                seg.last_resp = Some(r.ts);
            }
        }
    }
    done.extend(open.into_values().map(OpenSegment::close));
    done.sort_by_key(|s| (s.opened_at, s.sid));
    Ok(done)
}

/// Nearest-rank percentile: the element at 1-indexed position
/// `ceil(q * n / 100)` of the sorted samples. Exact integer arithmetic,
/// no interpolation.
pub fn percentile<T: Ord + Copy>(samples: &[T], q: u32) -> Result<T, ProfileError> {
    if samples.is_empty() {
        return Err(ProfileError::EmptySamples);
    }
    if q == 0 || q > 100 {
        return Err(ProfileError::BadPercentile(q));
    }
    let mut sorted: Vec<T> = samples.to_vec();
    sorted.sort_unstable();
    let rank = (q as usize * sorted.len()).div_ceil(100);
    Ok(sorted[rank - 1])
}

/// Turn one sid's training segments into a template that covers them.
///
/// Initial delay is the 99th percentile of the observed first-response
/// delays, floored at the hand-over bound delta so the result always
/// loads. Spacing is the 90th percentile of all response gaps pooled
/// across the segments; a class whose bursts are all single packets has
/// no gaps, in which case the epoch length stands in. Count is the
/// largest observed burst plus ten percent, rounded up.
pub fn synthesize(
    sid: Sid,
    segments: &[Segment],
    cfg: &PacerConfig,
) -> Result<ScheduleTemplate, ProfileError> {
    let d_i: Vec<TimeNs> = segments.iter().filter(|s| s.p >= 1).map(|s| s.d_i).collect();
    if d_i.is_empty() {
        return Err(ProfileError::NoBursts(sid));
    }
    let pooled: Vec<TimeNs> = segments.iter().flat_map(|s| s.d_s.iter().copied()).collect();
    let max_p = segments.iter().map(|s| s.p).max().unwrap_or(0);

    let initial_delay = percentile(&d_i, 99)?.max(cfg.delta);
    let spacing = match percentile(&pooled, 90) {
        Ok(g) => g.max(TimeNs(1)),
        Err(ProfileError::EmptySamples) => cfg.epsilon,
        Err(e) => return Err(e),
    };
    let count = u32::try_from((11 * max_p).div_ceil(10)).unwrap_or(u32::MAX);
    Ok(ScheduleTemplate { sid, initial_delay, spacing, count })
}

/// Profile a whole log: segment it, group by sid, synthesize per sid.
/// Returns the templates plus the sids skipped for lack of data.
pub fn profile_log(
    log: &EventLog,
    cfg: &PacerConfig,
) -> Result<(Vec<ScheduleTemplate>, Vec<Sid>), FormatError> {
    let mut by_sid: BTreeMap<Sid, Vec<Segment>> = BTreeMap::new();
    for seg in segment_logs(log)? {
        by_sid.entry(seg.sid).or_default().push(seg);
    }
    let mut templates = Vec::new();
    let mut skipped = Vec::new();
    for (sid, segs) in by_sid {
        match synthesize(sid, &segs, cfg) {
            Ok(t) => templates.push(t),
            Err(_) => skipped.push(sid),
        }
    }
    Ok((templates, skipped))
}
