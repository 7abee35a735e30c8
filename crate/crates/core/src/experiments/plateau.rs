use serde::{Deserialize, Serialize};

pub const DEFAULT_WINDOW: usize = 500;
pub const DEFAULT_REL_TOL: f64 = 1e-3;

/// A maximal run of epochs over which the loss barely moves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauEvent {
    pub start: usize,
    pub end: usize,
    /// Mean loss over `start..=end`.
    pub level: f64,
}

impl PlateauEvent {
    pub fn duration(&self) -> usize {
        self.end - self.start
    }
}

/// The window `[t − w, t]` is flat when the loss moves by less than
/// `rel_tol` relative to its largest value inside the window, i.e.
/// `(max − min) / max < rel_tol`. On a decreasing log this is
/// `(L[t − w] − L[t]) / L[t − w] < rel_tol`. Overlapping flat windows are
/// merged into one event.
pub fn detect_plateau(losses: &[f64], window: usize, rel_tol: f64) -> Vec<PlateauEvent> {
    let window = window.max(1);
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for t in window..losses.len() {
        let s = t - window;
        let (lo, hi) = losses[s..=t]
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| {
                (lo.min(l), hi.max(l))
            });
        let change = if hi > 0.0 { (hi - lo) / hi } else { 0.0 };
        if change < rel_tol {
            match spans.last_mut() {
                Some(last) if s <= last.1 => last.1 = t,
                _ => spans.push((s, t)),
            }
        }
    }
    spans
        .into_iter()
        .map(|(start, end)| PlateauEvent {
            start,
            end,
            level: losses[start..=end].iter().sum::<f64>() / (end - start + 1) as f64,
        })
        .collect()
}
