//! In-process mailboxes connecting virtual ranks.
//!
//! A collective is a sequence of exchange rounds. In a round every endpoint
//! first posts its outgoing messages into the destination mailboxes, then
//! (after the implicit barrier) drains its own mailbox. Envelopes are sorted by
//! sender position before delivery, so results never depend on how endpoints
//! are scheduled across threads.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs per-rank closures either inline or on a dedicated rayon pool.
#[derive(Clone)]
pub struct Executor {
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("threads", &self.threads())
            .finish()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor { pool: None }
    }

    /// `threads <= 1` runs inline.
    pub fn with_threads(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Self::sequential());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Domain(format!("cannot build thread pool: {e}")))?;
        Ok(Executor {
            pool: Some(Arc::new(pool)),
        })
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match &self.pool {
            Some(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            None => items.iter().map(f).collect(),
        }
    }
}

#[derive(Debug)]
pub(crate) struct Envelope {
    pub src_pos: usize,
    /// Shared, so one buffer can be posted to many destinations.
    pub payload: Arc<[u8]>,
}

/// One participant of one (sub-)collective in a round.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Endpoint<'a> {
    /// Sub-collective index inside a batched call.
    pub tag: usize,
    pub pos: usize,
    pub group: &'a [usize],
}

impl Endpoint<'_> {
    pub fn rank(&self) -> usize {
        self.group[self.pos]
    }
}

/// All endpoints of every sub-collective, in (tag, position) order.
pub(crate) fn endpoints<'a>(groups: &[&'a [usize]]) -> Vec<Endpoint<'a>> {
    groups
        .iter()
        .enumerate()
        .flat_map(|(tag, group)| (0..group.len()).map(move |pos| Endpoint { tag, pos, group }))
        .collect()
}

/// Runs one exchange round. `send` returns `(destination position, payload)`
/// pairs; `recv` receives the envelopes addressed to the endpoint sorted by
/// sender position.
pub(crate) fn exchange<O, S, R>(
    executor: &Executor,
    endpoints: &[Endpoint<'_>],
    send: S,
    recv: R,
) -> Result<Vec<O>>
where
    O: Send,
    S: Fn(&Endpoint<'_>) -> Vec<(usize, Arc<[u8]>)> + Sync + Send,
    R: Fn(&Endpoint<'_>, Vec<Envelope>) -> Result<O> + Sync + Send,
{
    let mut mailboxes: HashMap<(usize, usize), Mutex<Vec<Envelope>>> =
        HashMap::with_capacity(endpoints.len());
    for ep in endpoints {
        if mailboxes
            .insert((ep.rank(), ep.tag), Mutex::new(Vec::new()))
            .is_some()
        {
            return Err(Error::Shape(format!(
                "rank {} appears twice in sub-collective {}",
                ep.rank(),
                ep.tag
            )));
        }
    }

    executor.map(endpoints, |ep| {
        for (dest_pos, payload) in send(ep) {
            let key = (ep.group[dest_pos], ep.tag);
            mailboxes[&key].lock().unwrap().push(Envelope {
                src_pos: ep.pos,
                payload,
            });
        }
    });

    executor
        .map(endpoints, |ep| {
            let mut inbox = std::mem::take(&mut *mailboxes[&(ep.rank(), ep.tag)].lock().unwrap());
            inbox.sort_by_key(|e| e.src_pos);
            recv(ep, inbox)
        })
        .into_iter()
        .collect()
}
