//! Schedule-driven traffic shaping for cloaked tunnels.
//!
//! The crate implements a transmit pipeline in which the timing and wire
//! size of every packet leaving a host is a function of public state only:
//! transmit schedules fire at precomputed slots, payload is padded to a
//! fixed size, dummy packets substitute for absent payload, and emission is
//! batched on fixed epoch boundaries so that handler execution time never
//! reaches the wire. Around that pipeline sit four supporting pieces:
//!
//! * [`schedule`] and [`engine`] hold the schedule calendar, the update
//!   queue through which the guest steers it, and the epoch-batched
//!   emission loop.
//! * [`tunnel`] implements the guest-side transport glue: padding,
//!   flow-control and congestion bookkeeping, and the causal delay floors
//!   that keep reactive transmissions a fixed distance from the inbound
//!   events that triggered them.
//! * [`simnet`] and [`models`] form an executable small-step machine
//!   (environment, guest, emitter) whose paired execution is checked
//!   mechanically in [`noninterference`].
//! * [`profile`] derives schedule templates from request/response logs and
//!   [`cluster`] groups corpus objects so padded sizes are shared by at
//!   least a configurable number of objects.
//!
//! All times are integer ticks (nanoseconds at wire scale; simulations
//! conventionally run one tick per microsecond). There is no floating-point
//! time anywhere and arithmetic on time panics on overflow rather than
//! wrapping.

pub mod cluster;
pub mod engine;
pub mod models;
pub mod noninterference;
pub mod profile;
pub mod scenario;
pub mod schedule;
pub mod simnet;
pub mod tunnel;
pub mod types;

pub use types::{FlowId, PacerConfig, Packet, PacketKind, TimeNs};
