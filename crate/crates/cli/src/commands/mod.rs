//! One module per subcommand.

pub mod bench;
pub mod costvol;
pub mod eval;
pub mod flow;
pub mod train;

use dcvnet::tape::Precision;

/// Flags shared by every subcommand.
#[derive(Clone, Copy, Debug)]
pub struct Globals {
    pub seed: Option<u64>,
    pub precision: Precision,
}

impl Globals {
    pub fn precision_name(&self) -> &'static str {
        match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}
