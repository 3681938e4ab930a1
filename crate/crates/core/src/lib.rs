pub mod numerics;
pub mod plant;
pub mod trajopt;
pub mod sysid;
pub mod lqg;
pub mod harness;
