//! Combines the task loss with the per-block SSIA losses.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_task: f64,
    pub lambda_sb: f64,
    /// One weight per attached block, lowest prediction stage first.
    pub per_block: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_task: 1.0,
            lambda_sb: 0.2,
            per_block: vec![1.0, 2.0, 3.0],
        }
    }
}

/// `Σ_n λ^sb_n · L^sb_n`; an empty list gives a constant zero.
pub fn total_ssia_loss<T: Real>(tape: &mut Tape<T>, block_losses: &[Var], w: &LossWeights) -> Result<Var> {
    if block_losses.len() != w.per_block.len() {
        return Err(Error::Config(format!(
            "{} block losses but {} per-block weights",
            block_losses.len(),
            w.per_block.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&l, &lam) in block_losses.iter().zip(&w.per_block) {
        let term = tape.scale(l, T::from_f64(lam));
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

/// `λ^task · task + λ^sb · ssia`. With `ssia = None` (or `λ^sb = 0`) the SSIA
/// term is left out of the graph, so the objective is exactly the baseline one.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, task: Var, ssia: Option<Var>, w: &LossWeights) -> Result<Var> {
    let task = if w.lambda_task == 1.0 {
        task
    } else {
        tape.scale(task, T::from_f64(w.lambda_task))
    };
    match ssia {
        Some(s) if w.lambda_sb != 0.0 => {
            let s = tape.scale(s, T::from_f64(w.lambda_sb));
            tape.add(task, s)
        }
        _ => Ok(task),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(tape: &mut Tape<f64>, v: &[f64]) -> Vec<Var> {
        v.iter().map(|&x| tape.leaf(Tensor::scalar(x), true)).collect()
    }

    #[test]
    fn weighted_block_sum() {
        let mut tape = Tape::new();
        let ls = scalars(&mut tape, &[0.1, 0.2, 0.3]);
        let t = total_ssia_loss(&mut tape, &ls, &LossWeights::default()).unwrap();
        assert!((tape.value(t).item() - 1.4).abs() < 1e-12);

        let w = LossWeights {
            per_block: vec![1.0],
            ..LossWeights::default()
        };
        let t = total_ssia_loss(&mut tape, &ls[..1], &w).unwrap();
        assert_eq!(tape.value(t).item(), 0.1);

        let w = LossWeights {
            per_block: vec![],
            ..LossWeights::default()
        };
        let t = total_ssia_loss(&mut tape, &[], &w).unwrap();
        assert_eq!(tape.value(t).item(), 0.0);

        assert!(total_ssia_loss(&mut tape, &ls[..2], &LossWeights::default()).is_err());
    }

    #[test]
    fn combined_objective() {
        let mut tape = Tape::new();
        let v = scalars(&mut tape, &[2.0, 0.5]);
        let w = LossWeights::default();
        let l = total_loss(&mut tape, v[0], Some(v[1]), &w).unwrap();
        assert!((tape.value(l).item() - 2.1).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(v[0]).unwrap().item(), 1.0);
        assert!((g.get(v[1]).unwrap().item() - 0.2).abs() < 1e-12);

        let off = LossWeights { lambda_sb: 0.0, ..w };
        let l = total_loss(&mut tape, v[0], Some(v[1]), &off).unwrap();
        assert_eq!(l, v[0]);
    }
}
