pub mod baselines;
pub mod engine;
pub mod injector;
pub mod informer;
pub mod metrics;
pub mod sim;
pub mod time;
pub mod workflow;
