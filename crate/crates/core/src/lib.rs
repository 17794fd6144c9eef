pub mod qstate;
pub mod ideal_cloner;
pub mod adiabatic;
pub mod linear_optics;
pub mod protocol;
pub mod config;
pub mod verify;
pub mod report;
