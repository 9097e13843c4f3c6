pub mod elementwise;
pub mod loss;
pub mod matmul;
pub mod nn;
pub mod shape;
