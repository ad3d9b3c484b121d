pub mod calibration;
pub mod correction;
pub mod dataset;
pub mod selection;
pub mod ses_index;
pub mod spine;
pub mod perturbation;
pub mod rng;
pub mod synthetic;
pub mod dbn;
pub mod report;
