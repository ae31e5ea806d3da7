mod elementwise;
mod linalg;
mod reduce;
mod shape;
mod spatial;

pub use elementwise::LEAKY_SLOPE;
