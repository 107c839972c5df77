//! Bookkeeping for the zero-copy receive path: offered options and the
//! receive requests started from them.

use std::collections::HashMap;

use super::{ChanError, RecvHandle};

#[derive(Debug)]
pub(crate) struct OptionBook<T, R> {
    next: u64,
    offered: HashMap<u64, T>,
    reqs: HashMap<u64, R>,
}

impl<T, R> Default for OptionBook<T, R> {
    fn default() -> Self {
        OptionBook { next: 0, offered: HashMap::new(), reqs: HashMap::new() }
    }
}

impl<T, R> OptionBook<T, R> {
    pub fn offer(&mut self, t: T) -> u64 {
        self.next += 1;
        self.offered.insert(self.next, t);
        self.next
    }

    pub fn take(&mut self, token: u64) -> Result<T, ChanError> {
        self.offered.remove(&token).ok_or(ChanError::OptionConsumed)
    }

    /// Puts an option back, e.g. after a rejected destination.
    pub fn restore(&mut self, token: u64, t: T) {
        self.offered.insert(token, t);
    }

    pub fn start(&mut self, r: R) -> RecvHandle {
        self.next += 1;
        self.reqs.insert(self.next, r);
        RecvHandle(self.next)
    }

    pub fn req(&self, h: RecvHandle) -> Result<&R, ChanError> {
        self.reqs.get(&h.0).ok_or(ChanError::UnknownHandle)
    }

    pub fn req_mut(&mut self, h: RecvHandle) -> Result<&mut R, ChanError> {
        self.reqs.get_mut(&h.0).ok_or(ChanError::UnknownHandle)
    }

    pub fn finish(&mut self, h: RecvHandle) -> Option<R> {
        self.reqs.remove(&h.0)
    }

    pub fn reqs_mut(&mut self) -> impl Iterator<Item = (&u64, &mut R)> {
        self.reqs.iter_mut()
    }

    pub fn is_idle(&self) -> bool {
        self.reqs.is_empty()
    }
}
