//! One-class-one-controller workbench: train a decoder-only Transformer
//! controller with a PID output head by backpropagating a closed-loop
//! model-reference tracking loss through a differentiable evaporation
//! process, then evaluate it zero-shot against receding-horizon optimal
//! control baselines.

pub mod baselines;
pub mod cltrain;
pub mod ctxformer;
pub mod diffcore;
pub mod evalharness;
pub mod metasample;
pub mod plant;
pub mod refmodel;
pub mod rngstream;
