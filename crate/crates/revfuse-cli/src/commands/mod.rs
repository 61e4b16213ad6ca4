//! Command implementations behind the CLI surface.

pub mod bench;
pub mod eval;
pub mod fuse;
pub mod train;

use std::sync::Mutex;

use crate::error::CliResult;

/// Seed-stream tags: every random stream a run uses derives from the root
/// seed XOR one of these, so streams never collide or alias each other.
pub const STREAM_MODEL: u64 = 0x4d4f_4445_4c00_0001;
pub const STREAM_SYNTH: u64 = 0x5359_4e54_4800_0002;
pub const STREAM_BATCH: u64 = 0x4241_5443_4800_0003;

/// Applies `f` to every item across worker threads and returns the outputs
/// in input order. Output values never depend on scheduling — only the
/// wall-clock does — so commands stay deterministic while image-level work
/// (fusion, metrics) spreads across cores.
pub fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let threads = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(n);
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let next = Mutex::new(0usize);
    let done = Mutex::new(Vec::<(usize, O)>::with_capacity(n));
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let idx = {
                    let mut guard = next.lock().unwrap();
                    let idx = *guard;
                    if idx >= n {
                        break;
                    }
                    *guard += 1;
                    idx
                };
                let out = f(&items[idx]);
                done.lock().unwrap().push((idx, out));
            });
        }
    });
    let mut tagged = done.into_inner().unwrap();
    tagged.sort_by_key(|&(idx, _)| idx);
    tagged.into_iter().map(|(_, out)| out).collect()
}

/// `par_map` for fallible work; on failure returns the error of the
/// earliest failing item (deterministic regardless of which thread hit it).
pub fn try_par_map<I, O, F>(items: &[I], f: F) -> CliResult<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> CliResult<O> + Sync,
{
    par_map(items, f).into_iter().collect()
}
