#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consensus;
pub mod economy;
pub mod error;
pub mod experiment;
pub mod flenv;
pub mod ledger;
pub mod netsim;
pub mod rng;
pub mod shapley;
pub mod verify;

pub use error::{Error, Result};
