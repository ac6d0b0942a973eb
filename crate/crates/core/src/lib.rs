pub mod analysis;
pub mod cli;
pub mod data;
pub mod io;
pub mod layers;
pub mod linalg;
pub mod ssm;
pub mod tensor;
pub mod train;
