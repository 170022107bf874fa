//! Service, command-line tool and bench harness for the tmd engine.

pub mod bench;
pub mod config;
pub mod server;
