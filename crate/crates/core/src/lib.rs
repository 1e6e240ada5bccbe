pub mod bridge;
pub mod clock;
pub mod dataflow;
pub mod events;
pub mod funcpool;
pub mod functions;
pub mod metrics;
pub mod pilot;
pub mod task;
pub mod workflow;
