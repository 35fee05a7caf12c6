pub mod entropy;
pub mod flowcore;
pub mod harness;
pub mod linalg;
pub mod partition;
pub mod report;
pub mod sampling;
pub mod scalar;
pub mod section;
pub mod singular;
pub mod tube;
