pub mod bank;
pub mod budget;
pub mod conformance;
pub mod metrics;
pub mod mock;
pub mod protocol;
pub mod report;
pub mod session;
pub mod time;
