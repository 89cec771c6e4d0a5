pub mod bae;
pub mod checks;
pub mod ecr;
pub mod lrd;
pub mod offload;
pub mod segnet;
pub mod tensor;
