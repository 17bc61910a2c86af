pub mod ad;
pub mod attacks;
pub mod harness;
pub mod nets;
pub mod privacy;
pub mod seed;
pub mod solvers;
