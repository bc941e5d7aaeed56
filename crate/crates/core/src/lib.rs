pub mod casegen;
pub mod fold;
pub mod harness;
pub mod refutils;
pub mod scanner;
pub mod tarfmt;
pub mod tracer;
pub mod vfs;
