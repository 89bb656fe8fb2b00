//! Estimation of excursion-set volumes `P{f(X) >= u}` from few evaluations of
//! an expensive function, using intrinsic Kriging and a stepwise
//! uncertainty-reduction design.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod error;
pub mod excursion;
pub mod harness;
pub mod kriging;
pub mod seed;
pub mod simulate;
pub mod sur;

pub use covariance::{check_cpd, CpdReport, Family, GeneralizedCovariance, MonomialBasis};
pub use error::{Error, Result};
pub use excursion::{
    excursion_probability, gaussian_quantile, gaussian_tail, mc_volume, misclassification_proxy, plugin_volume,
    ExcursionEstimate, InputDistribution,
};
pub use kriging::{fill_distance, DesignSet, HypotheticalUpdate, KrigingModel, Prediction, Probe};
pub use simulate::{sample_conditional_paths, sample_path, ConditionalSampler, PathSample, PathSampler, Tabulated};
pub use sur::{
    bin_probabilities, criterion_oracle_mc, make_quantizer, quantize, run_sur, Quantizer, SurConfig, SurRun, SurState,
};
