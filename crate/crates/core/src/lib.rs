pub mod netsim;
pub mod pools;
pub mod sharedring;
pub mod fed;
pub mod verify;
pub mod chain;
pub mod experiments;
