pub mod oracle;
pub mod synthetic;
