//! Bounded parallel execution of independent replicate jobs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::Result;

/// Runs `f(0..n)` on at most `jobs` threads. Results come back in index
/// order, so output never depends on scheduling; the first failing index
/// (in index order) determines the error.
pub fn run_indexed<T, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, n.max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every index ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CliError;

    #[test]
    fn keeps_index_order() {
        for jobs in [1, 3, 16] {
            let out = run_indexed(10, jobs, |i| Ok(i * i)).unwrap();
            assert_eq!(out, (0..10).map(|i| i * i).collect::<Vec<_>>());
        }
        assert!(run_indexed(0, 4, |i| Ok(i)).unwrap().is_empty());
    }

    #[test]
    fn reports_first_error_by_index() {
        let r = run_indexed(6, 3, |i| if i % 2 == 1 { Err(CliError::invalid(format!("bad {i}"))) } else { Ok(i) });
        match r {
            Err(CliError::Validation(v)) => assert_eq!(v, vec!["bad 1".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
