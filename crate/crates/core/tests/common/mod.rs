pub mod calls;
pub mod oracle;
