//! Visual place recognition by holistic feature-map aggregation.
//!
//! The library turns a stack of mid-level feature maps into a single
//! compact global descriptor by cascading row-wise MLP mixing blocks over
//! the flattened maps, then compressing depth and row dimensions with two
//! small projections. Everything needed to train and evaluate the
//! aggregator ships here: a minimal reverse-mode tape ([`tensor`]), the
//! model itself ([`aggregator`]), a metric-learning trainer ([`trainer`]),
//! nearest-neighbour evaluation ([`retrieval`]), and file formats plus a
//! synthetic data generator ([`data_io`]).
//!
//! Determinism is a design constraint throughout: seeded generators,
//! fixed accumulation orders, and kernels whose results do not depend on
//! the thread count.

pub mod aggregator;
pub mod data_io;
pub mod error;
pub mod retrieval;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

use std::sync::OnceLock;

static THREAD_CAP: OnceLock<usize> = OnceLock::new();

/// Pins the worker-thread cap for the heavy kernels. First caller wins;
/// later calls (including the `MIXAGG_THREADS` fallback) are ignored.
pub fn set_thread_cap(n: usize) {
    let _ = THREAD_CAP.set(n.max(1));
}

/// Worker-thread cap, from [`set_thread_cap`] or the `MIXAGG_THREADS`
/// environment variable, defaulting to 1. Results never depend on this —
/// it only trades latency for cores.
pub fn thread_cap() -> usize {
    *THREAD_CAP.get_or_init(|| match std::env::var("MIXAGG_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                log::warn!("ignoring invalid MIXAGG_THREADS value {raw:?}; using 1 thread");
                1
            }
        },
        Err(_) => 1,
    })
}
