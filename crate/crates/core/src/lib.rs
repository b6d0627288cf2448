pub mod curriculum;
pub mod dataset;
pub mod equiv;
pub mod exec;
pub mod instance;
pub mod metrics;
pub mod ir;
pub mod reward;
pub mod rng;
pub mod search;
pub mod tensor;
