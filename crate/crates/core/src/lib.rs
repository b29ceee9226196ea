pub mod covmodel;
pub mod error;
pub mod linalg;
pub mod mixture;
pub mod special;

pub use error::{Error, Result};
pub mod cgf;
pub mod simulate;
pub mod optim;
pub mod estimate;
pub mod conditional;
pub mod study;
pub mod diagnostics;
pub mod io;
