//! Early stopping on a validation loss with strict improvement.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    /// The latest epoch is the new best.
    Improved,
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: f64::INFINITY,
            best_epoch: None,
            wait: 0,
        }
    }

    /// Record the loss of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, loss: f64) -> Decision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            return Decision::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopPoint {
    /// Epoch (1-based) after which training halts; `None` if it never does.
    pub stop_epoch: Option<usize>,
    pub best_epoch: usize,
}

/// Replay the stopping rule over a loss history.
///
/// ```
/// use admri::train::early_stopping;
/// let s = early_stopping(&[5.0, 4.0, 3.0, 3.1, 3.2, 3.3], 3);
/// assert_eq!((s.stop_epoch, s.best_epoch), (Some(6), 3));
/// ```
pub fn early_stopping(history: &[f64], patience: usize) -> StopPoint {
    let mut es = EarlyStopping::new(patience);
    for (i, &l) in history.iter().enumerate() {
        if es.observe(i + 1, l) == Decision::Stop {
            return StopPoint {
                stop_epoch: Some(i + 1),
                best_epoch: es.best_epoch().unwrap_or(1),
            };
        }
    }
    StopPoint {
        stop_epoch: None,
        best_epoch: es.best_epoch().unwrap_or(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_never_stops() {
        let h: Vec<f64> = (0..50).map(|i| 100.0 - i as f64).collect();
        assert_eq!(early_stopping(&h, 3).stop_epoch, None);
    }

    #[test]
    fn patience_one() {
        let s = early_stopping(&[2.0, 3.0], 1);
        assert_eq!((s.stop_epoch, s.best_epoch), (Some(2), 1));
    }

    #[test]
    fn ties_are_not_improvements() {
        let s = early_stopping(&[1.0, 1.0, 1.0], 2);
        assert_eq!((s.stop_epoch, s.best_epoch), (Some(3), 1));
    }
}
