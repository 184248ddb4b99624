//! Forward/backward pass accounting.
//!
//! Every optimizer step costs one forward and one backward pass. On top of
//! that each adapted batch is charged two evaluation forwards: the
//! prompt-free pass that produces its statistics and the pass with the
//! weighted (or freshly learned) prompt.

use serde::{Deserialize, Serialize};

use super::engine::Path;

/// Evaluation forwards charged to every batch on the coreset paths.
pub const EVAL_PASSES_PER_BATCH: u64 = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeCounters {
    pub forward: u64,
    pub backward: u64,
    pub batches: u64,
}

impl ComputeCounters {
    pub fn optimizer_steps(&mut self, steps: usize) {
        self.forward += steps as u64;
        self.backward += steps as u64;
    }

    pub fn eval_passes(&mut self, passes: u64) {
        self.forward += passes;
    }

    pub fn batch_done(&mut self) {
        self.batches += 1;
    }

    pub fn mean_forward(&self) -> f64 {
        ratio(self.forward, self.batches)
    }

    pub fn mean_backward(&self) -> f64 {
        ratio(self.backward, self.batches)
    }

    pub fn since(&self, earlier: &ComputeCounters) -> ComputeCounters {
        ComputeCounters {
            forward: self.forward - earlier.forward,
            backward: self.backward - earlier.backward,
            batches: self.batches - earlier.batches,
        }
    }

    /// Replays the charges of a decision sequence without running anything.
    pub fn from_paths<'a>(
        paths: impl IntoIterator<Item = &'a Path>,
        steps_scratch: usize,
        steps_refine: usize,
    ) -> Self {
        let mut c = Self::default();
        for path in paths {
            match path {
                Path::Scratch => c.optimizer_steps(steps_scratch),
                Path::Refine => c.optimizer_steps(steps_refine),
                Path::NoAdapt => {}
            }
            c.eval_passes(if *path == Path::NoAdapt { 1 } else { EVAL_PASSES_PER_BATCH });
            c.batch_done();
        }
        c
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replayed_identity() {
        let paths = [Path::Scratch, Path::Refine, Path::Refine, Path::Scratch, Path::Refine];
        let c = ComputeCounters::from_paths(&paths, 50, 1);
        assert_eq!(c.backward, 2 * 50 + 3);
        assert_eq!(c.forward, c.backward + 2 * 5);
        assert_eq!(c.batches, 5);
    }

    #[test]
    fn source_only_costs_one_forward() {
        let c = ComputeCounters::from_paths(&[Path::NoAdapt; 4], 50, 1);
        assert_eq!((c.forward, c.backward), (4, 0));
    }
}
