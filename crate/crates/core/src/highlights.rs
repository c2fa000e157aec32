//! Auto-curation of reviewable clips from expressive events.

use crate::{ExpressiveEvent, HighlightClip, Micros};

/// Expands each event by `pad` on both sides (clamped to `[0, session_end]`)
/// and merges overlapping or touching expansions into clips.
///
/// `events` must be sorted by start. The dominant label of a clip is the label
/// of its highest-peak event; ties keep the earliest event.
pub fn detect_highlights(events: &[ExpressiveEvent], pad: Micros, session_end: Micros) -> Vec<HighlightClip> {
    let mut clips: Vec<HighlightClip> = Vec::new();
    let mut best_peak = f64::NEG_INFINITY;
    for (idx, event) in events.iter().enumerate() {
        let start = event.start.saturating_sub(pad).min(session_end);
        let end = event.end.saturating_add(pad).min(session_end);
        match clips.last_mut() {
            Some(clip) if start <= clip.end => {
                clip.end = clip.end.max(end);
                clip.event_refs.push(idx);
                if event.peak_score > best_peak {
                    best_peak = event.peak_score;
                    clip.dominant_label = event.label;
                }
            }
            _ => {
                best_peak = event.peak_score;
                clips.push(HighlightClip {
                    start,
                    end,
                    event_refs: vec![idx],
                    dominant_label: event.label,
                });
            }
        }
    }
    clips
}
