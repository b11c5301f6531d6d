pub mod acpf;
pub mod agent;
pub mod feeder;
pub mod par;
pub mod operator;
pub mod oracle;
pub mod runtime;
pub mod scenario;
