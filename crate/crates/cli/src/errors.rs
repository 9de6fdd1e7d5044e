//! Error categories and their exit codes.
//!
//! Failures print one line `error[<category>]: <message>` to stderr and exit
//! with the category's code. Usage errors from argument parsing exit 2.

use std::fmt;

use dlo::DloError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config,
    Input,
    Format,
    Io,
    Numerical,
    /// A check ran and failed (gradcheck).
    Check,
    Internal,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Input => "input",
            Category::Format => "format",
            Category::Io => "io",
            Category::Numerical => "numerical",
            Category::Check => "check",
            Category::Internal => "internal",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 3,
            Category::Input => 4,
            Category::Format => 5,
            Category::Io => 6,
            Category::Numerical => 7,
            Category::Check => 8,
            Category::Internal => 1,
        }
    }

    fn of_dlo(e: &DloError) -> Self {
        match e {
            DloError::Config(_) => Category::Config,
            DloError::Invalid(_) | DloError::Degenerate(_) | DloError::EmptyCloud | DloError::Unusable(_) => {
                Category::Input
            }
            DloError::Format(_) => Category::Format,
            DloError::Io(_) => Category::Io,
            DloError::Numerical(_) | DloError::Num(_) => Category::Numerical,
        }
    }

    /// The first explicit category in the chain, else one derived from the
    /// innermost library error.
    pub fn of(err: &anyhow::Error) -> Self {
        if let Some(c) = err.downcast_ref::<Category>() {
            return *c;
        }
        if let Some(d) = err.downcast_ref::<DloError>() {
            return Self::of_dlo(d);
        }
        for e in err.chain() {
            if let Some(d) = e.downcast_ref::<DloError>() {
                return Self::of_dlo(d);
            }
            if e.downcast_ref::<std::io::Error>().is_some() {
                return Category::Io;
            }
        }
        Category::Internal
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error", self.name())
    }
}

impl std::error::Error for Category {}
