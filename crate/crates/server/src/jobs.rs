//! Background execution of automatic phases with a bounded worker count.

use std::sync::Arc;

use tokio::sync::{mpsc, Semaphore};

use crate::pipeline::run_automatic_phase;
use crate::store::{SessionStore, Status};

/// Handle for enqueueing pending sessions. Each session id is run at most
/// once; the store refuses to start a session that is not pending.
#[derive(Clone, Debug)]
pub struct JobQueue {
    tx: mpsc::UnboundedSender<String>,
}

impl JobQueue {
    /// Spawns the dispatcher on the current runtime.
    pub fn start(store: Arc<SessionStore>, workers: usize) -> Self {
        let (tx, mut rx) = mpsc::unbounded_channel::<String>();
        let permits = Arc::new(Semaphore::new(workers.max(1)));
        tokio::spawn(async move {
            while let Some(id) = rx.recv().await {
                let permit = permits.clone().acquire_owned().await.expect("semaphore is never closed");
                let store = store.clone();
                tokio::task::spawn_blocking(move || {
                    match run_automatic_phase(&store, &id) {
                        Ok(m) => tracing::info!(session = %id, status = %m.status, "job finished"),
                        Err(e) => tracing::error!(session = %id, "job could not run: {e}"),
                    }
                    drop(permit);
                });
            }
        });
        Self { tx }
    }

    pub fn enqueue(&self, id: String) {
        if self.tx.send(id).is_err() {
            tracing::error!("job dispatcher has stopped");
        }
    }

    /// Re-enqueues pending sessions and fails sessions a previous process
    /// left running.
    pub fn recover(&self, store: &SessionStore) -> crate::error::Result<()> {
        for m in store.list()? {
            match m.status {
                Status::Pending => self.enqueue(m.id),
                Status::Running { stage } => {
                    store.set_status(
                        &m.id,
                        Status::Failed {
                            stage,
                            code: "Interrupted".into(),
                            reason: "the server stopped while this stage was running".into(),
                        },
                    )?;
                }
                Status::Done | Status::Failed { .. } => {}
            }
        }
        Ok(())
    }
}
