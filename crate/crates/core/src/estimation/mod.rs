//! Synthetic regression experiments on mixing measures: data generation,
//! least-squares fitting, Voronoi losses, the adversarial sequence and
//! convergence-rate sweeps.

mod adversarial;
mod dataset;
mod fit;
mod l2;
mod sweep;
mod voronoi;

pub use adversarial::{adversarial_sequence, AdversarialSequence};
pub use dataset::{sample_dataset, RegressionDataset};
pub use fit::{
    fit_from, fit_least_squares, FitConfig, FitResult, ModelSpec, Objective, TracePoint,
};
pub use l2::{l2_distance_mc, L2Estimate};
pub use voronoi::{
    align_atoms, atom_coordinates, canonicalize, loss_d1r, loss_d2, match_gate_mass,
    voronoi_assign, AlignGroup, VoronoiCells,
};
pub use sweep::{
    adversarial_curve, experiment_instance, frozen_fingerprint_data, log_log_slope,
    rate_curves_csv, rate_sweep, train_toy, AdversarialConfig, AdversarialCurve,
    AdversarialPoint, ProblemConfig, RateCurve, RateRecord, SweepConfig, ToyConfig, ToyCurves,
    ToyRecord, TOY_METHODS,
};
