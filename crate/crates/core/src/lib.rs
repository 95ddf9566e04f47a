//! Packet-level model of an integrated user plane: flow classification and
//! queueing, slot-based radio scheduling, session control and end-to-end
//! path composition, tied together by a discrete-event engine.

pub mod error;
pub mod mac;
pub mod model;
pub mod pipeline;
pub mod path;
pub mod session;
pub mod sim;
