//! Human-oracle service for the active learning loop.
//!
//! The loop runs on its own thread and owns all model and pool state. It
//! talks to the HTTP side only through [`Shared`]: the observer publishes
//! phase, explanations and iteration records, and [`HumanOracle`] parks the
//! loop in `AWAITING_LABELS` until every open request is answered.
//!
//! Routes (JSON unless noted):
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/state` | phase, iteration, counts, poll interval |
//! | GET | `/queries` | pending label requests |
//! | GET | `/explanations/{instance}` | prototype evidence |
//! | GET | `/explanations/{instance}/heatmap/{prototype}` | PNG overlay |
//! | GET | `/images/{instance}` | PNG |
//! | GET | `/metrics` | iteration records |
//! | POST | `/labels` | `{"request_id", "label"}` or `{"request_id", "skip": true}` |
//! | POST | `/control/pause`, `/control/resume` | |

pub mod api;
pub mod journal;
pub mod oracle;
pub mod state;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;

use protolab_core::config::ExperimentConfig;
use protolab_core::data::SplitDataset;
use protolab_core::error::Result;
use protolab_core::experiment::{run_in, Artifact, RunKind};

pub use api::router;
pub use journal::{Journal, JournalEntry};
pub use oracle::{HumanOracle, ServiceObserver};
pub use state::{LabelRequest, RequestStatus, Shared, StateView};

/// Shared state for one experiment, with answers from an existing journal
/// ready for replay.
pub fn session(cfg: &ExperimentConfig, data: &SplitDataset, journal: &Path) -> Result<Arc<Shared>> {
    let journal = Journal::open(journal)?;
    Ok(Shared::new(
        Arc::new(data.data.clone()),
        data.splits.train.len(),
        cfg.model.prototypes.num_classes,
        journal,
        cfg.oracle.poll_interval_ms,
    ))
}

/// Runs the loop on a new thread with the human oracle. The run directory
/// is rebuilt from scratch; answers already in the journal are reused, so a
/// restarted experiment replays to where it stopped without asking again.
pub fn spawn_loop(
    cfg: ExperimentConfig,
    kind: RunKind,
    data: SplitDataset,
    dir: PathBuf,
    shared: Arc<Shared>,
) -> JoinHandle<Result<Artifact>> {
    std::thread::spawn(move || {
        let mut oracle = HumanOracle::new(shared.clone());
        let mut observer = ServiceObserver::new(shared.clone());
        let out = run_in(&cfg, kind, &data, &dir, true, Some(&mut oracle), &mut observer);
        if let Err(e) = &out {
            log::error!("loop stopped: {e}");
            shared.set_error(e.to_string());
        }
        out
    })
}

/// Serves the API until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    shared: Arc<Shared>,
    console: Option<PathBuf>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(shared, console))
        .with_graceful_shutdown(shutdown)
        .await
}
