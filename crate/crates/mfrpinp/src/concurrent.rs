//! Online loop with training on its own thread.
//!
//! Inference runs on the calling thread and never waits for training. The
//! learner thread receives transitions over a channel, trains a private
//! copy of the model and publishes a snapshot after every applied step;
//! inference swaps the newest snapshot in between frames. Which snapshot a
//! frame sees depends on thread timing, so these runs are not reproducible.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use mfrpinp_core::learner::{
    run_loop_with, InlineLearner, Learner, LearnerError, LoopConfig, LossRecord, RunObserver, RunOutput,
    Scenario, TransitionHigh, TransitionLow,
};
use mfrpinp_core::np::MfrPinpModel;

use crate::error::{Error, Result};

enum Msg {
    Low(TransitionLow),
    High(TransitionHigh),
    /// End of iteration `iter`.
    Tick(usize),
}

type Slot = Arc<Mutex<Option<MfrPinpModel>>>;

struct Remote {
    tx: Sender<Msg>,
    latest: Slot,
    low: u64,
    high: u64,
}

impl Learner for Remote {
    fn push_low(&mut self, t: TransitionLow) {
        self.low += 1;
        let _ = self.tx.send(Msg::Low(t));
    }

    fn push_high(&mut self, t: TransitionHigh) {
        self.high += 1;
        let _ = self.tx.send(Msg::High(t));
    }

    fn after_iteration(
        &mut self,
        iter: usize,
        model: &mut MfrPinpModel,
        _losses: &mut Vec<LossRecord>,
    ) -> Result<(), LearnerError> {
        let _ = self.tx.send(Msg::Tick(iter));
        let fresh = self.latest.try_lock().ok().and_then(|mut g| g.take());
        if let Some(m) = fresh {
            *model = m;
        }
        Ok(())
    }

    fn inserted(&self) -> (u64, u64) {
        (self.low, self.high)
    }
}

struct Trained {
    model: MfrPinpModel,
    losses: Vec<LossRecord>,
    errors: Vec<(usize, String)>,
}

fn learner_thread(
    rx: Receiver<Msg>,
    latest: Slot,
    mut model: MfrPinpModel,
    cfg: &LoopConfig,
) -> Result<Trained, LearnerError> {
    let mut learner = InlineLearner::new(cfg)?;
    let period = cfg.train.train_period;
    let mut out = Trained {
        model: model.clone(),
        losses: Vec::new(),
        errors: Vec::new(),
    };
    let due = |iter: usize| period.is_some_and(|p| (iter + 1) % p == 0);
    while let Ok(first) = rx.recv() {
        // take everything already queued; train at most once for it
        let mut train_at = None;
        for msg in std::iter::once(first).chain(rx.try_iter()) {
            match msg {
                Msg::Low(t) => learner.push_low(t),
                Msg::High(t) => learner.push_high(t),
                Msg::Tick(i) if due(i) => train_at = Some(i),
                Msg::Tick(_) => {}
            }
        }
        let Some(iter) = train_at else { continue };
        match learner.train(&mut model, iter) {
            Ok(Some(rec)) => {
                if rec.applied {
                    *latest.lock().unwrap_or_else(|e| e.into_inner()) = Some(model.clone());
                }
                out.losses.push(rec);
            }
            Ok(None) => {}
            Err(e) => out.errors.push((iter, e.to_string())),
        }
    }
    out.model = model;
    Ok(out)
}

/// Runs the online loop with a background learner. The returned model is
/// the learner's final state; losses carry the iteration that triggered
/// each phase.
pub fn run_concurrent(
    scenario: &Scenario<'_>,
    cfg: &LoopConfig,
    model: MfrPinpModel,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput> {
    cfg.validate()?;
    let (tx, rx) = channel();
    let latest: Slot = Arc::new(Mutex::new(None));
    let mut remote = Remote {
        tx,
        latest: latest.clone(),
        low: 0,
        high: 0,
    };
    let start = model.clone();
    std::thread::scope(|s| {
        let handle = s.spawn(|| learner_thread(rx, latest, start, cfg));
        let run = run_loop_with(scenario, cfg, model, &mut remote, observer);
        drop(remote);
        let trained = handle
            .join()
            .map_err(|_| Error::runtime("learner thread panicked"))??;
        let mut out = run?;
        out.losses = trained.losses;
        out.errors.extend(trained.errors);
        out.errors.sort_by_key(|e| e.0);
        out.model = trained.model;
        Ok(out)
    })
}
