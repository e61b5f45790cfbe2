pub mod eval;
pub mod infer;
pub mod phantom;
pub mod train;
pub mod verify;

use std::time::Instant;

/// Shared bookkeeping for manifests.
pub struct RunContext {
    pub started: Instant,
    pub argv: Vec<String>,
}

impl RunContext {
    pub fn new() -> Self {
        RunContext { started: Instant::now(), argv: std::env::args().collect() }
    }

    pub fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }
}
