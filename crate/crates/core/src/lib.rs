pub mod cheeger;
pub mod error;
pub mod extension;
pub mod graph;
pub mod nonlocal;
pub mod solve;
pub mod space;
pub mod verify;

pub use error::{Error, Result};
