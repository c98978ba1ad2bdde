use super::{Entity, EntityRegister, RelId, RelationshipInstance};
use crate::ids::{LocalId, NodeRef};

/// Inverse of one primitive mutation.
#[derive(Clone, Debug)]
pub(super) enum Undo {
    NextId(u64),
    NextRel(u64),
    Inserted(LocalId),
    Replaced(Box<Entity>),
    Removed(Box<Entity>),
    RelInserted(RelId),
    RelRemoved(RelationshipInstance),
    Forward(LocalId, Option<LocalId>),
    Import(NodeRef, Option<LocalId>),
    Retired(LocalId),
    Event,
}

/// Position in the undo journal; see [`EntityRegister::savepoint`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[must_use]
pub struct Savepoint(usize);

impl EntityRegister {
    /// Opens a savepoint. Savepoints nest; every one must be either
    /// released or rolled back.
    pub fn savepoint(&mut self) -> Savepoint {
        self.open_savepoints += 1;
        Savepoint(self.journal.len())
    }

    pub fn release(&mut self, _sp: Savepoint) {
        self.open_savepoints = self.open_savepoints.saturating_sub(1);
        self.maybe_clear_journal();
    }

    /// Undoes every mutation made since `sp` was opened.
    pub fn rollback_to(&mut self, sp: Savepoint) {
        while self.journal.len() > sp.0 {
            let undo = self.journal.pop().expect("non-empty");
            self.undo(undo);
        }
        self.open_savepoints = self.open_savepoints.saturating_sub(1);
        self.maybe_clear_journal();
    }

    pub(super) fn maybe_clear_journal(&mut self) {
        if self.open_savepoints == 0 {
            self.journal.clear();
        }
    }

    fn undo(&mut self, undo: Undo) {
        match undo {
            Undo::NextId(v) => self.next_id = v,
            Undo::NextRel(v) => self.next_rel = v,
            Undo::Inserted(id) => {
                if let Some(e) = self.entities.remove(&id) {
                    self.unindex_entity(&e);
                }
            }
            Undo::Replaced(old) | Undo::Removed(old) => {
                if let Some(cur) = self.entities.remove(&old.local_id) {
                    self.unindex_entity(&cur);
                }
                self.index_entity(&old);
                self.entities.insert(old.local_id, *old);
            }
            Undo::RelInserted(id) => {
                if let Some(rel) = self.relationships.remove(&id) {
                    for end in [rel.source, rel.target] {
                        if let Some(set) = self.adjacency.get_mut(&end) {
                            set.remove(&id);
                            if set.is_empty() {
                                self.adjacency.remove(&end);
                            }
                        }
                    }
                }
            }
            Undo::RelRemoved(rel) => {
                self.adjacency.entry(rel.source).or_default().insert(rel.id);
                self.adjacency.entry(rel.target).or_default().insert(rel.id);
                self.relationships.insert(rel.id, rel);
            }
            Undo::Forward(from, prev) => match prev {
                Some(p) => {
                    self.forwards.insert(from, p);
                }
                None => {
                    self.forwards.remove(&from);
                }
            },
            Undo::Import(origin, prev) => match prev {
                Some(p) => {
                    self.imports.insert(origin, p);
                }
                None => {
                    self.imports.remove(&origin);
                }
            },
            Undo::Retired(id) => {
                self.retired.remove(&id);
            }
            Undo::Event => {
                self.events.pop();
                self.next_seq -= 1;
            }
        }
    }
}
