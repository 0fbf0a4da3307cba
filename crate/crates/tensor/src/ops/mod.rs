mod elementwise;
mod layout;
mod matmul;
mod nn;
mod reduce;

pub use elementwise::Activation;
pub use nn::DEFAULT_LN_EPS;
