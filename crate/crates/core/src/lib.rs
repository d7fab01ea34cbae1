pub mod dataio;
pub mod gp;
pub mod matchloss;
pub mod numerics;
pub mod sim4opt;
pub mod surrogate;
pub mod metatrain;
pub mod search;
pub mod bench;
pub mod error;
pub mod config;
pub mod cli;
