//! Network face of duplexkit: the session websocket and admin API, the
//! per-connection session actor, and the scripted-session runner.

pub mod hub;
pub mod live;
pub mod protocol;
pub mod script;
pub mod server;

pub use hub::{GatewayOptions, Hub};
pub use protocol::{ClientMessage, ErrorCode, ServerMessage};
pub use server::router;
