//! Registered communication memory of a group, optionally drawn from
//! caller-supplied allocation hooks.

use crate::error::{EpError, Result};
use crate::fabric::{Endpoint, Window};

/// Alignment requested from hooks for every communication buffer.
pub const BUFFER_ALIGN: usize = 256;

/// Caller-provided allocator used for every buffer a group registers.
pub trait AllocationHooks {
    /// Returns a buffer of at least `bytes` bytes, or `None` to refuse.
    fn allocate(&mut self, bytes: usize, align: usize) -> Option<Vec<u8>>;
    fn release(&mut self, buffer: Vec<u8>);
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AllocationReport {
    /// (label, bytes) per registered buffer, in allocation order.
    pub entries: Vec<(String, usize)>,
    pub hook_allocations: usize,
    pub internal_allocations: usize,
}

impl AllocationReport {
    pub fn total_bytes(&self) -> usize {
        self.entries.iter().map(|(_, b)| b).sum()
    }

    /// Bytes of all buffers whose label starts with `prefix`.
    pub fn bytes_with_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(l, _)| l.starts_with(prefix)).map(|(_, b)| b).sum()
    }
}

pub struct GroupMemory {
    hooks: Option<Box<dyn AllocationHooks>>,
    windows: Vec<Window>,
    report: AllocationReport,
}

impl std::fmt::Debug for GroupMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GroupMemory")
            .field("hooks", &self.hooks.is_some())
            .field("report", &self.report)
            .finish()
    }
}

impl GroupMemory {
    pub fn new(hooks: Option<Box<dyn AllocationHooks>>) -> Self {
        Self { hooks, windows: Vec::new(), report: AllocationReport::default() }
    }

    /// Allocates `bytes` zeroed bytes and registers them as a window.
    pub fn register(&mut self, ep: &Endpoint, label: &str, bytes: usize) -> Result<Window> {
        if bytes == 0 {
            return Err(EpError::invalid(format!("buffer {label} would be empty")));
        }
        let memory = match self.hooks.as_mut() {
            Some(h) => {
                let mut buf = h
                    .allocate(bytes, BUFFER_ALIGN)
                    .ok_or_else(|| EpError::capacity(format!("allocation hook refused {bytes} bytes for {label}")))?;
                if buf.len() < bytes {
                    let got = buf.len();
                    h.release(buf);
                    return Err(EpError::capacity(format!("allocation hook returned {got} < {bytes} bytes")));
                }
                buf.truncate(bytes);
                buf.fill(0);
                self.report.hook_allocations += 1;
                buf
            }
            None => {
                self.report.internal_allocations += 1;
                vec![0; bytes]
            }
        };
        let w = ep.register_window_with(memory)?;
        self.windows.push(w);
        self.report.entries.push((label.to_string(), bytes));
        Ok(w)
    }

    pub fn report(&self) -> &AllocationReport {
        &self.report
    }

    pub fn live_windows(&self) -> usize {
        self.windows.len()
    }

    /// Deregisters every window and hands memory back to the hooks.
    pub fn release_all(&mut self, ep: &Endpoint) -> Result<()> {
        for w in self.windows.drain(..) {
            let memory = ep.deregister_window(&w)?;
            if let Some(h) = self.hooks.as_mut() {
                h.release(memory);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{Fabric, FabricOptions, NodeTopology};
    use std::cell::Cell;
    use std::rc::Rc;

    struct Counting {
        live: Rc<Cell<isize>>,
        budget: usize,
    }

    impl AllocationHooks for Counting {
        fn allocate(&mut self, bytes: usize, _align: usize) -> Option<Vec<u8>> {
            if bytes > self.budget {
                return None;
            }
            self.budget -= bytes;
            self.live.set(self.live.get() + 1);
            Some(vec![0xAA; bytes])
        }

        fn release(&mut self, buffer: Vec<u8>) {
            self.budget += buffer.len();
            self.live.set(self.live.get() - 1);
        }
    }

    #[test]
    fn hooks_supply_and_reclaim() {
        let f = Fabric::new(NodeTopology::new(1, 1).unwrap(), FabricOptions::default());
        let ep = f.endpoint(0);
        let live = Rc::new(Cell::new(0));
        let mut mem = GroupMemory::new(Some(Box::new(Counting { live: live.clone(), budget: 100 })));
        let w = mem.register(&ep, "a", 60).unwrap();
        assert_eq!(ep.read_local(&w, 0, 60).unwrap(), vec![0; 60]);
        let err = mem.register(&ep, "b", 60).unwrap_err();
        assert_eq!(err.code, crate::ErrorCode::CapacityExceeded);
        assert_eq!(live.get(), 1);
        assert_eq!(mem.report().internal_allocations, 0);
        mem.release_all(&ep).unwrap();
        assert_eq!(live.get(), 0);
        assert_eq!(f.registered_bytes(0), 0);
    }
}
