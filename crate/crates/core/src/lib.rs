//! MQTT client authentication test bench: a broker with pluggable
//! username/password, mutual-certificate and JWT authentication, a device
//! client, a modeled secure channel and a deterministic scenario harness.

pub mod broker;
pub mod channel;
pub mod client;
pub mod harness;
pub mod jws;
pub mod mqtt;
pub mod net;
pub mod pki;
pub mod provision;
pub mod transport;
