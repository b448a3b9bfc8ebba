//! File container and verification suites behind the `tuckattn` binary.

pub mod io;
pub mod suites;
