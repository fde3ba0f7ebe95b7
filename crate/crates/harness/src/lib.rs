//! Dataset generation, training, evaluation suites and OOD reports for
//! `flowmpc`.

pub mod commands;
pub mod config;
pub mod report;
