pub mod directory;
pub mod host;
pub mod ident;
pub mod net;
pub mod ubf;
pub mod perm;
pub mod sched;
pub mod sim;
