pub mod error;
pub mod nn;
pub mod radio;
pub mod mobility;
pub mod parallel;
pub mod queue;
pub mod scheduler;
pub mod assoc;
pub mod federated;
pub mod experiments;
