pub mod corpus;
pub mod covering;
pub mod dsl;
pub mod error;
pub mod expr;
pub mod jet;
pub mod laxkit;
pub mod linalg;
pub mod ops;
pub mod oracle;
pub mod par;
pub mod recursion;
pub mod report;

pub use error::{Error, Result};
