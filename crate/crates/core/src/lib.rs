//! Grid job submission for event-data skims: VO membership and account
//! mapping, replicated data catalogs, skim planning, input sandboxes,
//! hyperjob orchestration over simulated sites, and output collection.

pub mod archive;
pub mod catalog;
pub mod clock;
pub mod collector;
pub mod orchestrator;
pub mod query;
pub mod sandbox;
pub mod sitesim;
pub mod status;
pub mod transport;
pub mod vo;

pub use clock::SimClock;
pub use transport::{Endpoint, MessageKind, Transport};
