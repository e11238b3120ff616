//! Reporting helpers for the acceptance run.

use std::time::Duration;

/// Outcome of one acceptance criterion, built up from individual checks.
#[derive(Debug)]
pub struct Criterion {
    pub id: usize,
    pub title: &'static str,
    checks: Vec<(String, bool)>,
}

impl Criterion {
    pub fn new(id: usize, title: &'static str) -> Self {
        println!("--- criterion {id}: {title}");
        Self { id, title, checks: Vec::new() }
    }

    /// Records and prints one check.
    pub fn check(&mut self, pass: bool, what: impl Into<String>) -> bool {
        let what = what.into();
        println!("    [{}] {what}", if pass { "ok" } else { "xx" });
        self.checks.push((what, pass));
        pass
    }

    /// Prints a line of context that is not itself a check.
    pub fn note(&self, what: impl AsRef<str>) {
        println!("    {}", what.as_ref());
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|(_, p)| *p)
    }

    /// The single summary line for this criterion.
    pub fn finish(self, elapsed: Duration) -> bool {
        let pass = self.passed();
        let failed = self.checks.iter().filter(|(_, p)| !p).count();
        println!(
            "{} criterion {}: {} ({} checks, {failed} failed, {:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.checks.len(),
            elapsed.as_secs_f64()
        );
        pass
    }
}

/// Counts of `ranks` (each in `0..=max_rank`) over `bins` equal-width bins.
pub fn rank_histogram(ranks: &[usize], max_rank: usize, bins: usize) -> Vec<usize> {
    assert!((max_rank + 1).is_multiple_of(bins), "rank range must split evenly into bins");
    let width = (max_rank + 1) / bins;
    let mut h = vec![0; bins];
    for &r in ranks {
        h[r / width] += 1;
    }
    h
}

/// Pearson chi-square statistic against a uniform expectation.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}
