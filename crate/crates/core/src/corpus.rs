//! Session-ordered lookups over a dialogue corpus.

use std::collections::HashMap;

use crate::domain::{DialogueTurn, Speaker};
use crate::ingest::sort_corpus;

/// Index over a corpus sorted by `(session_id, index)`.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    turns: Vec<DialogueTurn>,
    position: HashMap<String, usize>,
}

impl CorpusIndex {
    pub fn new(mut turns: Vec<DialogueTurn>) -> Self {
        sort_corpus(&mut turns);
        let position = turns.iter().enumerate().map(|(i, t)| (t.turn_id.clone(), i)).collect();
        Self { turns, position }
    }

    pub fn turns(&self) -> &[DialogueTurn] {
        &self.turns
    }

    pub fn get(&self, turn_id: &str) -> Option<&DialogueTurn> {
        self.position.get(turn_id).map(|&i| &self.turns[i])
    }

    /// Up to `window` turns of the same session immediately before `turn_id`,
    /// oldest first.
    pub fn context(&self, turn_id: &str, window: usize) -> &[DialogueTurn] {
        let Some(&pos) = self.position.get(turn_id) else {
            return &[];
        };
        let session = &self.turns[pos].session_id;
        let mut start = pos;
        while start > 0 && pos - start < window && &self.turns[start - 1].session_id == session {
            start -= 1;
        }
        &self.turns[start..pos]
    }

    /// The counterpart turn directly following `turn_id` in its session.
    pub fn response(&self, turn_id: &str) -> Option<&DialogueTurn> {
        let &pos = self.position.get(turn_id)?;
        self.turns
            .get(pos + 1)
            .filter(|next| next.session_id == self.turns[pos].session_id && next.speaker == Speaker::Counterpart)
    }
}
