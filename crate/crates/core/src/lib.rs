//! Global exponential observers for nonlinear systems: construction of the
//! corrected observers, simulation in continuous time, with sampled outputs
//! and on open state spaces, and sampling-based certification of the
//! inequalities behind them.

pub mod cli;
pub mod lyapunov;
pub mod numerics;
pub mod observer_compact;
pub mod observer_openset;
pub mod observer_sampled;
pub mod systems;

use thiserror::Error;

/// Any error raised by the library modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    System(#[from] systems::SystemError),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Lyapunov(#[from] lyapunov::LyapunovError),
    #[error(transparent)]
    Observer(#[from] observer_compact::ObserverError),
    #[error(transparent)]
    Sampled(#[from] observer_sampled::SampledError),
    #[error(transparent)]
    OpenSet(#[from] observer_openset::OpenSetError),
}
