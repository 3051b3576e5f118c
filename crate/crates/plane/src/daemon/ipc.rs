//! Completion records over a local stream socket. Operations write one line
//! per finished operation; the listener hands each record to the request
//! waiting on its op id.

use std::collections::HashMap;
use std::io::Write;
use std::os::unix::net::UnixStream as StdUnixStream;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::net::UnixListener;
use tokio::sync::oneshot;

use crate::wire::CompletionRecord;

/// Requests waiting for their completion record.
#[derive(Debug, Default, Clone)]
pub struct Pending {
    waiters: Arc<Mutex<HashMap<String, oneshot::Sender<CompletionRecord>>>>,
}

impl Pending {
    pub fn register(&self, op_id: &str) -> oneshot::Receiver<CompletionRecord> {
        let (tx, rx) = oneshot::channel();
        self.waiters.lock().unwrap().insert(op_id.to_string(), tx);
        rx
    }

    pub fn forget(&self, op_id: &str) {
        self.waiters.lock().unwrap().remove(op_id);
    }

    fn deliver(&self, rec: CompletionRecord) {
        let waiter = self.waiters.lock().unwrap().remove(&rec.op_id);
        match waiter {
            Some(tx) => {
                let _ = tx.send(rec);
            }
            None => tracing::debug!(op_id = %rec.op_id, "completion record without a waiter"),
        }
    }
}

/// Bind the socket, replacing a stale one.
pub fn bind(path: &Path) -> std::io::Result<UnixListener> {
    let _ = std::fs::remove_file(path);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    UnixListener::bind(path)
}

/// Serve completion records forever, rebinding after socket errors.
pub async fn listen(mut listener: UnixListener, path: PathBuf, pending: Pending) {
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                let pending = pending.clone();
                tokio::spawn(async move {
                    let mut lines = BufReader::new(stream).lines();
                    while let Ok(Some(line)) = lines.next_line().await {
                        match serde_json::from_str::<CompletionRecord>(&line) {
                            Ok(rec) => pending.deliver(rec),
                            Err(e) => tracing::warn!(error = %e, "bad completion record"),
                        }
                    }
                });
            }
            Err(e) => {
                tracing::warn!(error = %e, "completion listener failed; rebinding");
                tokio::time::sleep(Duration::from_millis(50)).await;
                match bind(&path) {
                    Ok(l) => listener = l,
                    Err(e) => tracing::error!(error = %e, "rebinding completion socket"),
                }
            }
        }
    }
}

/// Write one completion record; used from operation threads.
pub fn signal_completion(path: &Path, rec: &CompletionRecord) -> std::io::Result<()> {
    let mut s = StdUnixStream::connect(path)?;
    let mut line = serde_json::to_vec(rec).expect("serializable");
    line.push(b'\n');
    s.write_all(&line)?;
    s.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn records_reach_their_waiters_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ipc");
        let pending = Pending::default();
        let l = bind(&path).unwrap();
        tokio::spawn(listen(l, path.clone(), pending.clone()));
        let a = pending.register("a");
        let b = pending.register("b");
        let p = path.clone();
        tokio::task::spawn_blocking(move || {
            for id in ["a", "b"] {
                signal_completion(
                    &p,
                    &CompletionRecord {
                        op_id: id.into(),
                        outcome: "ok".into(),
                        duration_seconds: 0.0,
                    },
                )
                .unwrap();
            }
        })
        .await
        .unwrap();
        assert_eq!(a.await.unwrap().op_id, "a");
        assert_eq!(b.await.unwrap().op_id, "b");
    }

    #[tokio::test]
    async fn missing_record_times_out() {
        let pending = Pending::default();
        let rx = pending.register("x");
        let r = tokio::time::timeout(Duration::from_millis(100), rx).await;
        assert!(r.is_err());
    }
}
