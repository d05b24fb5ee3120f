use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{MatchCandidate, MatchError, MatchStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

/// Stage-2 candidates awaiting a human verdict, keyed by candidate id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationQueue {
    entries: BTreeMap<String, MatchCandidate>,
}

impl VerificationQueue {
    /// Adds stage-2 candidates; pairs already queued are left untouched.
    /// Returns how many entries were added.
    pub fn enqueue(&mut self, candidates: &[MatchCandidate]) -> Result<usize, MatchError> {
        if let Some(c) = candidates.iter().find(|c| c.status != MatchStatus::Stage2Pass) {
            return Err(MatchError::NotStage2(c.candidate_id.clone()));
        }
        let mut added = 0;
        for c in candidates {
            if !self.entries.contains_key(&c.candidate_id) {
                self.entries.insert(c.candidate_id.clone(), c.clone());
                added += 1;
            }
        }
        Ok(added)
    }

    pub fn verdict(&mut self, candidate_id: &str, verdict: Verdict) -> Result<&MatchCandidate, MatchError> {
        let c = self
            .entries
            .get_mut(candidate_id)
            .ok_or_else(|| MatchError::UnknownCandidate(candidate_id.to_string()))?;
        if c.status != MatchStatus::Stage2Pass {
            return Err(MatchError::NotPending(candidate_id.to_string()));
        }
        c.status = match verdict {
            Verdict::Accept => MatchStatus::Verified,
            Verdict::Reject => MatchStatus::Rejected,
        };
        Ok(c)
    }

    pub fn get(&self, candidate_id: &str) -> Option<&MatchCandidate> {
        self.entries.get(candidate_id)
    }

    pub fn pending(&self) -> impl Iterator<Item = &MatchCandidate> {
        self.entries.values().filter(|c| c.status == MatchStatus::Stage2Pass)
    }

    pub fn all(&self) -> impl Iterator<Item = &MatchCandidate> {
        self.entries.values()
    }

    /// Everything except rejected pairs, or only verified pairs.
    pub fn export(&self, only_verified: bool) -> Vec<MatchCandidate> {
        self.entries
            .values()
            .filter(|c| match c.status {
                MatchStatus::Verified => true,
                MatchStatus::Rejected => false,
                _ => !only_verified,
            })
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::super::JointMethod;
    use super::*;

    fn passed(i: &str) -> MatchCandidate {
        let mut c = MatchCandidate::new(i, "t", JointMethod::Concat, 1.0);
        c.status = MatchStatus::Stage2Pass;
        c.stage2_score = Some(0.1);
        c
    }

    #[test]
    fn lifecycle() {
        let mut q = VerificationQueue::default();
        let cands = [passed("a"), passed("b"), passed("c")];
        assert_eq!(q.enqueue(&cands).unwrap(), 3);
        assert_eq!(q.pending().count(), 3);

        let (a, b) = (cands[0].candidate_id.clone(), cands[1].candidate_id.clone());
        assert_eq!(q.verdict(&a, Verdict::Accept).unwrap().status, MatchStatus::Verified);
        assert_eq!(q.verdict(&b, Verdict::Reject).unwrap().status, MatchStatus::Rejected);
        assert!(matches!(q.verdict(&a, Verdict::Reject), Err(MatchError::NotPending(_))));
        assert!(matches!(q.verdict("zzz", Verdict::Accept), Err(MatchError::UnknownCandidate(_))));

        assert_eq!(q.enqueue(&cands[..1]).unwrap(), 0);
        assert_eq!(q.get(&a).unwrap().status, MatchStatus::Verified);

        let verified: Vec<_> = q.export(true).into_iter().map(|c| c.instance_id).collect();
        assert_eq!(verified, vec!["a".to_string()]);
        assert_eq!(q.export(false).len(), 2);
    }

    #[test]
    fn only_stage2_candidates_are_queued() {
        let c = MatchCandidate::new("a", "t", JointMethod::Concat, 1.0);
        assert!(matches!(VerificationQueue::default().enqueue(&[c]), Err(MatchError::NotStage2(_))));
    }
}
