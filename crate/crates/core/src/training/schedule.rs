use crate::numerics::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    NoImprovement,
    /// The learning rate was just multiplied by the reduction factor.
    ReducedLr,
    /// No improvement for the early-stopping patience.
    Stop,
}

/// Reduce-once-on-plateau learning-rate schedule with early stopping.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub patience: usize,
    pub factor: Float,
    /// Non-improving epochs tolerated before stopping.
    pub stop_patience: usize,
    pub best_validation: Float,
    pub epochs_since_best: usize,
    pub reduced: bool,
}

impl Schedule {
    /// Drops the rate 10x after `patience` stale epochs; stops after `3 * patience`.
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            factor: 0.1,
            stop_patience: 3 * patience,
            best_validation: Float::INFINITY,
            epochs_since_best: 0,
            reduced: false,
        }
    }

    /// Records one epoch's validation loss; an epoch improves only if strictly below the best.
    pub fn observe(&mut self, validation: Float, lr: &mut Float) -> ScheduleEvent {
        if validation < self.best_validation {
            self.best_validation = validation;
            self.epochs_since_best = 0;
            return ScheduleEvent::Improved;
        }
        self.epochs_since_best += 1;
        if self.epochs_since_best >= self.stop_patience {
            ScheduleEvent::Stop
        } else if !self.reduced && self.epochs_since_best >= self.patience {
            self.reduced = true;
            *lr *= self.factor;
            ScheduleEvent::ReducedLr
        } else {
            ScheduleEvent::NoImprovement
        }
    }
}
