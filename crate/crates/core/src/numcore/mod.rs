//! Dense matrices and the reverse-mode tape used by the LM and the SAE.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, grad_check_entries, GradCheck};
pub use matrix::Matrix;
pub use tape::{Gradients, Segment, Tape, Var};

use crate::error::{Error, Result};

/// Sum over rows of log-softmax(`logits` row)[target], one row per target.
pub fn logprob_of_targets(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    let rows = tape.value(logits).rows();
    if rows != targets.len() {
        return Err(Error::Shape {
            op: "logprob_of_targets",
            left: tape.value(logits).shape(),
            right: (targets.len(), 1),
        });
    }
    let picks: Vec<_> = targets.iter().copied().enumerate().collect();
    tape.log_softmax_pick(logits, &picks)
}

#[cfg(test)]
mod tests;
