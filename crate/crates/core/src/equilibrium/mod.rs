//! Assembly of the equilibrium triple and independent verification of its
//! defining properties.

mod certificate;
mod reopt;
mod triple;
mod verify;

pub use certificate::{
    certify, certify_triple, check_certificate, Certification, CertifyOptions, CheckItem,
    CheckReport, EquilibriumCertificate, Flags, Meta, Residuals, Tolerances, TripleRecord, Values,
};
pub use triple::{assemble, EquilibriumTriple};
pub use verify::{
    fairness_min_slack, verify_buhlmann, verify_measurability, verify_nash, BuhlmannReport,
    MeasurabilityReport, NashReport,
};
