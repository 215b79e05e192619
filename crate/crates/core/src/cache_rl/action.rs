use serde::{Deserialize, Serialize};

use crate::cache::{CacheState, ContentId};
use crate::error::{Error, Result};

/// A content the agent may admit this slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: ContentId,
    pub size_bytes: u64,
    /// Requests for this content observed in the slot.
    pub requests: u32,
    /// Predicted popularity, used for admission order and eviction.
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub admitted: Vec<ContentId>,
    pub evicted: Vec<ContentId>,
    pub skipped: Vec<ContentId>,
}

fn desc(a: f64, b: f64) -> std::cmp::Ordering {
    b.partial_cmp(&a).unwrap_or(std::cmp::Ordering::Equal)
}

/// Admits every selected candidate in descending score (ties by id),
/// evicting the lowest-scored residents (ties: higher id first) that were
/// neither admitted nor selected in this call. A candidate that cannot be made to fit is
/// skipped and the cache is left as it was for that candidate.
pub fn apply_action(
    cache: &mut CacheState,
    action: &[bool],
    candidates: &[Candidate],
    popularity: impl Fn(ContentId) -> f64,
    slot: u64,
) -> Result<ActionOutcome> {
    if action.len() != candidates.len() {
        return Err(Error::shape(
            "apply_action",
            format!("{} actions for {} candidates", action.len(), candidates.len()),
        ));
    }
    let mut chosen: Vec<&Candidate> = candidates
        .iter()
        .zip(action)
        .filter(|(_, &a)| a)
        .map(|(c, _)| c)
        .collect();
    chosen.sort_by(|a, b| desc(a.score, b.score).then(a.id.cmp(&b.id)));

    // Selected residents count as kept and are protected like admissions.
    let mut protected: Vec<ContentId> = chosen.iter().filter(|c| cache.contains(c.id)).map(|c| c.id).collect();
    let mut out = ActionOutcome::default();
    for c in chosen {
        if protected.contains(&c.id) {
            continue;
        }
        if c.size_bytes > cache.capacity_bytes() {
            log::warn!("content {} ({} B) exceeds cache capacity, skipped", c.id, c.size_bytes);
            out.skipped.push(c.id);
            continue;
        }
        let mut victims: Vec<(f64, ContentId, u64)> = cache
            .items()
            .filter(|it| !protected.contains(&it.id))
            .map(|it| (popularity(it.id), it.id, it.size_bytes))
            .collect();
        victims.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.1.cmp(&a.1))
        });
        let mut need = c.size_bytes.saturating_sub(cache.free_bytes());
        let mut evict = Vec::new();
        for (_, id, size) in victims {
            if need == 0 {
                break;
            }
            evict.push(id);
            need = need.saturating_sub(size);
        }
        if need > 0 {
            log::debug!("content {} cannot fit without evicting this slot's admissions", c.id);
            out.skipped.push(c.id);
            continue;
        }
        for id in evict {
            cache.remove(id);
            out.evicted.push(id);
        }
        cache.insert(c.id, c.size_bytes, slot)?;
        out.admitted.push(c.id);
        protected.push(c.id);
    }
    Ok(out)
}
