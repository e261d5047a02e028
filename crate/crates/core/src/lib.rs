//! Models for continuous optical-tweezer loading from a laser-cooled
//! reservoir: transport-cavity optics, reservoir rate equations, light-atom
//! scattering, Monte Carlo capture, the qubit preparation/readout cycle, and
//! the least-squares fitting used to analyse all of them.

pub mod bessel;
pub mod cavity;
pub mod error;
pub mod fit;
pub mod light;
pub mod loading;
pub mod ode;
pub mod phys;
pub mod pipeline;
pub mod reservoir;
pub mod rng;

pub use error::{Error, Result};
