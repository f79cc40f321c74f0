//! Parameter estimation: E-step, EMCLL objective and gradient, L-BFGS M-step.

pub mod emcll;
pub mod fit;
pub mod gradcheck;
pub mod init;
pub mod lbfgs;
pub mod params;

pub use emcll::{
    emcll, emcll_gradient, estep_sequence, Assignment, ClusterPartition, EStepEntry, Emcll,
};
pub use fit::{
    estep, fit, fit_with_clusters, mstep, update_class_prior, EStep, FitReport, MStepSummary,
};
pub use gradcheck::{check_gradient, CoordinateCheck, GradientCheck};
pub use init::{initialize, ModelStructure};
pub use lbfgs::{minimize, LbfgsOptions, LbfgsReport};
pub use params::ParamLayout;
