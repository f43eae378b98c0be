//! C ABI for the toolkit: opaque handles, integer status codes, and a
//! thread-local last-error message.

pub mod handles;

pub use handles::*;
