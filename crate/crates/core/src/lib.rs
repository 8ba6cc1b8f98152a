pub mod estimator;
pub mod harness;
pub mod markov;
pub mod matfun;
pub mod simulator;
