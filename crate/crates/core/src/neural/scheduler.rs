/// Improvement smaller than this does not reset the patience counter.
pub const PLATEAU_MIN_DELTA: f64 = 1e-6;

/// Reduce-on-plateau learning-rate schedule driven by validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            min_delta: PLATEAU_MIN_DELTA,
            best: None,
            wait: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one validation loss. Returns the learning-rate multiplier when
    /// the loss has gone `patience` entries without improving.
    pub fn observe(&mut self, loss: f64) -> Option<f64> {
        match self.best {
            Some(best) if loss >= best - self.min_delta => {
                self.wait += 1;
                if self.patience > 0 && self.wait >= self.patience {
                    self.wait = 0;
                    return Some(self.factor);
                }
                None
            }
            _ => {
                self.best = Some(loss);
                self.wait = 0;
                None
            }
        }
    }
}

/// 1-based positions in `history` at which a reduction fires.
pub fn plateau_events(history: &[f64], factor: f64, patience: usize) -> Vec<usize> {
    let mut s = PlateauScheduler::new(factor, patience);
    history
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| s.observe(l).map(|_| i + 1))
        .collect()
}
