//! Coordinator/worker round execution.
//!
//! The coordinator fans a round out to the selected clients, each worker
//! reports back through a shared [`RoundBarrier`] that counts acks, and the
//! coordinator blocks until the count reaches the target. Workers run as
//! scoped threads in this process; the worker closure is the message
//! boundary (model snapshot in, update plus simulated duration out).
//!
//! Simulated time is bookkeeping only: FedCS's "first K responders" are
//! ranked by reported simulated duration, never by wall-clock arrival.

use std::sync::{Condvar, Mutex};
use std::thread;

use crate::device_model::ClientId;
use crate::error::{Error, Result};

/// Counts completions until a fixed target is reached.
///
/// `acked` only grows, by one per [`RoundBarrier::ack`], and the barrier
/// fires exactly once, on the ack that brings it to the target.
#[derive(Debug)]
pub struct RoundBarrier<T> {
    target: usize,
    state: Mutex<BarrierState<T>>,
    done: Condvar,
}

#[derive(Debug)]
struct BarrierState<T> {
    acked: usize,
    collected: Vec<T>,
    fired: usize,
}

impl<T> RoundBarrier<T> {
    pub fn new(target: usize) -> Self {
        Self {
            target,
            state: Mutex::new(BarrierState {
                acked: 0,
                collected: Vec::with_capacity(target),
                fired: 0,
            }),
            done: Condvar::new(),
        }
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Record one completion. Returns `true` for the ack that completes the
    /// barrier. Acks past the target are rejected.
    pub fn ack(&self, item: T) -> Result<bool> {
        let mut s = self.state.lock().expect("barrier lock poisoned");
        if s.acked >= self.target {
            return Err(Error::config("ack past barrier target"));
        }
        s.collected.push(item);
        s.acked += 1;
        let complete = s.acked == self.target;
        if complete {
            s.fired += 1;
            self.done.notify_all();
        }
        Ok(complete)
    }

    pub fn acked(&self) -> usize {
        self.state.lock().expect("barrier lock poisoned").acked
    }

    /// Number of times completion fired (0 or 1).
    pub fn fired(&self) -> usize {
        self.state.lock().expect("barrier lock poisoned").fired
    }

    /// Block until `acked == target`, then hand over everything collected.
    pub fn wait(&self) -> Vec<T> {
        let mut s = self.state.lock().expect("barrier lock poisoned");
        while s.acked < self.target {
            s = self.done.wait(s).expect("barrier lock poisoned");
        }
        std::mem::take(&mut s.collected)
    }
}

/// What a worker sends back.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerOutput<R> {
    pub result: R,
    /// Simulated seconds the client needed for the round.
    pub simulated_duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completed<R> {
    pub client: ClientId,
    pub result: R,
    pub simulated_duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchMode {
    /// Every dispatched client must succeed; all results are kept.
    All,
    /// Keep the `keep` clients with the smallest simulated duration (ties
    /// by id); the rest, including failures, are discarded.
    Fastest { keep: usize },
}

/// Runs one round's worker calls and returns their results.
pub trait RoundExecutor {
    fn dispatch<R, F>(&self, clients: &[ClientId], mode: DispatchMode, work: F) -> Result<Vec<Completed<R>>>
    where
        R: Send,
        F: Fn(ClientId) -> std::result::Result<WorkerOutput<R>, String> + Sync;
}

/// One scoped thread per client.
#[derive(Debug, Clone, Copy, Default)]
pub struct ThreadExecutor;

impl RoundExecutor for ThreadExecutor {
    fn dispatch<R, F>(&self, clients: &[ClientId], mode: DispatchMode, work: F) -> Result<Vec<Completed<R>>>
    where
        R: Send,
        F: Fn(ClientId) -> std::result::Result<WorkerOutput<R>, String> + Sync,
    {
        dispatch_round(clients, mode, work)
    }
}

type Outcome<R> = (ClientId, std::result::Result<WorkerOutput<R>, String>);

/// Run `work` for every client concurrently and wait for all acks.
/// Results come back in ascending client id order regardless of the order
/// in which workers finished.
pub fn dispatch_round<R, F>(clients: &[ClientId], mode: DispatchMode, work: F) -> Result<Vec<Completed<R>>>
where
    R: Send,
    F: Fn(ClientId) -> std::result::Result<WorkerOutput<R>, String> + Sync,
{
    if clients.is_empty() {
        return Err(Error::config("dispatch needs at least one client"));
    }
    if let DispatchMode::Fastest { keep } = mode {
        if keep == 0 || keep > clients.len() {
            return Err(Error::config(format!(
                "cannot keep {keep} of {} dispatched clients",
                clients.len()
            )));
        }
    }

    let barrier: RoundBarrier<Outcome<R>> = RoundBarrier::new(clients.len());
    let mut outcomes = thread::scope(|scope| {
        for &client in clients {
            let barrier = &barrier;
            let work = &work;
            scope.spawn(move || {
                let out = work(client);
                barrier.ack((client, out)).expect("one ack per dispatched client");
            });
        }
        barrier.wait()
    });
    debug_assert_eq!(barrier.fired(), 1);
    outcomes.sort_by_key(|(id, _)| *id);

    match mode {
        DispatchMode::All => outcomes
            .into_iter()
            .map(|(client, out)| match out {
                Ok(o) => Ok(Completed {
                    client,
                    result: o.result,
                    simulated_duration: o.simulated_duration,
                }),
                Err(message) => Err(Error::ClientFailed { client, message }),
            })
            .collect(),
        DispatchMode::Fastest { keep } => {
            let mut first_failure = None;
            let mut ok: Vec<Completed<R>> = Vec::with_capacity(outcomes.len());
            for (client, out) in outcomes {
                match out {
                    Ok(o) => ok.push(Completed {
                        client,
                        result: o.result,
                        simulated_duration: o.simulated_duration,
                    }),
                    Err(message) => {
                        first_failure.get_or_insert(Error::ClientFailed { client, message });
                    }
                }
            }
            if ok.len() < keep {
                return Err(first_failure.expect("short only when some client failed"));
            }
            ok.sort_by(|a, b| {
                a.simulated_duration
                    .total_cmp(&b.simulated_duration)
                    .then(a.client.cmp(&b.client))
            });
            ok.truncate(keep);
            ok.sort_by_key(|c| c.client);
            Ok(ok)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    fn ids(n: u32) -> Vec<ClientId> {
        (0..n).map(ClientId).collect()
    }

    fn echo(id: ClientId) -> std::result::Result<WorkerOutput<u32>, String> {
        Ok(WorkerOutput {
            result: id.0 * 10,
            simulated_duration: f64::from(id.0),
        })
    }

    #[test]
    fn single_client_round() {
        let out = dispatch_round(&[ClientId(7)], DispatchMode::All, echo).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].result, 70);
    }

    #[test]
    fn reverse_completion_still_returns_id_order() {
        let out = dispatch_round(&ids(5), DispatchMode::All, |id| {
            thread::sleep(Duration::from_millis(u64::from(5 - id.0) * 15));
            echo(id)
        })
        .unwrap();
        assert_eq!(out.iter().map(|c| c.client).collect::<Vec<_>>(), ids(5));
    }

    #[test]
    fn failure_names_the_client() {
        let err = dispatch_round(&ids(4), DispatchMode::All, |id| {
            if id.0 == 2 {
                Err("boom".into())
            } else {
                echo(id)
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::ClientFailed { client: ClientId(2), .. }), "{err}");
    }

    #[test]
    fn fastest_mode_ranks_by_simulated_duration() {
        // Simulated durations reversed relative to ids.
        let out = dispatch_round(&ids(8), DispatchMode::Fastest { keep: 5 }, |id| {
            Ok(WorkerOutput {
                result: id.0,
                simulated_duration: f64::from(10 - id.0),
            })
        })
        .unwrap();
        assert_eq!(out.iter().map(|c| c.result).collect::<Vec<_>>(), vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn fastest_mode_drops_failed_stragglers() {
        let out = dispatch_round(&ids(4), DispatchMode::Fastest { keep: 3 }, |id| {
            if id.0 == 3 {
                Err("gone".into())
            } else {
                echo(id)
            }
        })
        .unwrap();
        assert_eq!(out.len(), 3);
        let err = dispatch_round(&ids(4), DispatchMode::Fastest { keep: 4 }, |id| {
            if id.0 == 3 {
                Err("gone".into())
            } else {
                echo(id)
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::ClientFailed { client: ClientId(3), .. }));
    }

    #[test]
    fn barrier_fires_once_and_rejects_extra_acks() {
        let b = RoundBarrier::new(2);
        assert!(!b.ack(1).unwrap());
        assert!(b.ack(2).unwrap());
        assert!(b.ack(3).is_err());
        assert_eq!(b.fired(), 1);
        assert_eq!(b.acked(), 2);
        assert_eq!(b.wait(), vec![1, 2]);
    }

    #[test]
    fn every_worker_runs_exactly_once() {
        let calls = AtomicUsize::new(0);
        let out = dispatch_round(&ids(32), DispatchMode::All, |id| {
            calls.fetch_add(1, Ordering::SeqCst);
            echo(id)
        })
        .unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 32);
        assert_eq!(out.len(), 32);
    }
}
