pub mod experts;
pub mod harness;
pub mod infer;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod vocab;
