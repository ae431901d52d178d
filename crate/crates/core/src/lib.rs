pub mod channel;
pub mod contracts;
pub mod crypto;
pub mod identity;
pub mod ledger;
pub mod simnet;
