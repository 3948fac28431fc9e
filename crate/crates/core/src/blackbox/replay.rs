//! Transcript replay adapter: answers queries from a recorded transcript,
//! in order, checking that each query matches the recording.

use std::path::Path;

use super::{BlackBox, BlackBoxError, Response, SemanticQuery, Transcript, TranscriptRecord};

#[derive(Debug)]
pub struct ReplayModel {
    records: Vec<TranscriptRecord>,
    next: usize,
    source: String,
}

impl ReplayModel {
    pub fn new(records: Vec<TranscriptRecord>) -> Self {
        let source = records.first().map(|r| r.adapter.clone()).unwrap_or_default();
        Self { records, next: 0, source }
    }

    pub fn load(path: &Path) -> Result<Self, BlackBoxError> {
        Ok(Self::new(Transcript::load(path)?))
    }

    pub fn remaining(&self) -> usize {
        self.records.len() - self.next
    }
}

impl BlackBox for ReplayModel {
    fn id(&self) -> String {
        format!("replay:{}", self.source)
    }

    fn ask(&mut self, q: &SemanticQuery) -> Result<Response, BlackBoxError> {
        let rec = self.records.get(self.next).ok_or_else(|| BlackBoxError::ReplayMismatch {
            index: self.next,
            message: "transcript exhausted".into(),
        })?;
        if &rec.query != q {
            return Err(BlackBoxError::ReplayMismatch {
                index: self.next,
                message: format!("recorded query {:?} differs from requested {:?}", rec.query, q),
            });
        }
        self.next += 1;
        Ok(rec.response.clone())
    }

    /// The recorded responses already reflect any reset, so this is a no-op.
    fn reset_cache(&mut self) -> Result<(), BlackBoxError> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::{BlackBoxHandle, DiversityProbe, Simulator, SimulatorConfig};

    #[test]
    fn replay_reproduces_responses() {
        let mut h = BlackBoxHandle::new(Box::new(Simulator::new(SimulatorConfig::default()).unwrap()));
        let qs: Vec<SemanticQuery> =
            (1..6).map(|t| SemanticQuery::Diversity(DiversityProbe { prompt_id: 0, target_length: t })).collect();
        let live: Vec<Response> = qs.iter().map(|q| h.ask(q).unwrap()).collect();
        let mut r = ReplayModel::new(h.transcript().records().to_vec());
        for (q, resp) in qs.iter().zip(&live) {
            assert_eq!(&r.ask(q).unwrap(), resp);
        }
        assert_eq!(r.remaining(), 0);
        assert!(r.ask(&qs[0]).is_err());
        assert!(r.reset_cache().is_ok());
    }

    #[test]
    fn mismatched_query_is_reported() {
        let mut h = BlackBoxHandle::new(Box::new(Simulator::new(SimulatorConfig::default()).unwrap()));
        h.ask(&SemanticQuery::Diversity(DiversityProbe { prompt_id: 0, target_length: 3 })).unwrap();
        let mut r = ReplayModel::new(h.transcript().records().to_vec());
        let e = r.ask(&SemanticQuery::Diversity(DiversityProbe { prompt_id: 1, target_length: 3 })).unwrap_err();
        assert!(matches!(e, BlackBoxError::ReplayMismatch { index: 0, .. }));
    }
}
