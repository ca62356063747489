pub mod crossview;
pub mod generate;
pub mod metrics;
pub mod pretrain;
pub mod reconstruct;
