//! Command-line front end: run configuration, file formats for node
//! sequences, error categories and the subcommands.

pub mod commands;
pub mod config;
pub mod errors;
pub mod nodes_io;

/// Renders an error chain on one line, leaving out category markers.
pub fn describe(err: &anyhow::Error) -> String {
    let cat = errors::Category::of(err);
    let marker = cat.to_string();
    err.chain()
        .map(|e| e.to_string())
        .filter(|m| *m != marker)
        .collect::<Vec<_>>()
        .join(": ")
}
