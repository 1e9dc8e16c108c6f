//! Reference wave-field solver with frequency-independent and
//! frequency-dependent impedance boundaries.

pub mod boundary;
pub mod fdtd;

pub use boundary::{
    boundary_velocity, driven_admittance, phasor, update_accumulators, AccumulatorState,
    AdeIntegrator, BoundaryModel, ComplexPair, RationalAdmittance, RealPole,
};
pub use fdtd::{
    default_sigma0, gaussian_ic, simulate, simulate_nodes, stability_dt, FieldState, MediumParams,
    SimulationResult, Solver, SourceSpec, CFL_FREQ_DEPENDENT, CFL_FREQ_INDEPENDENT,
};
