use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::FederationError;
use crate::ids::{Iid, TOP_LEVEL_IID};

/// One row of the hierarchy table: `⟨IID, A, L⟩` plus the parent link.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub iid: Iid,
    pub address: String,
    /// Level relative to the top level (0); children sit one level below.
    pub level: i32,
    pub parent_iid: Option<Iid>,
}

/// The instance hierarchy. IIDs are only issued here, at the top level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDirectory {
    records: BTreeMap<Iid, InstanceRecord>,
    next_iid: u32,
}

impl InstanceDirectory {
    pub fn new(top_address: impl Into<String>) -> Self {
        let mut records = BTreeMap::new();
        records.insert(
            TOP_LEVEL_IID,
            InstanceRecord {
                iid: TOP_LEVEL_IID,
                address: top_address.into(),
                level: 0,
                parent_iid: None,
            },
        );
        Self { records, next_iid: 1 }
    }

    pub fn register_instance(
        &mut self,
        parent_iid: Iid,
        address: impl Into<String>,
    ) -> Result<Iid, FederationError> {
        let parent = self
            .records
            .get(&parent_iid)
            .ok_or(FederationError::UnknownParent(parent_iid))?;
        let level = parent.level - 1;
        let iid = Iid(self.next_iid);
        self.next_iid += 1;
        self.records.insert(
            iid,
            InstanceRecord {
                iid,
                address: address.into(),
                level,
                parent_iid: Some(parent_iid),
            },
        );
        Ok(iid)
    }

    /// Re-inserts a record replayed from the log.
    pub(super) fn restore(&mut self, record: InstanceRecord) {
        self.next_iid = self.next_iid.max(record.iid.0 + 1);
        self.records.insert(record.iid, record);
    }

    pub fn get(&self, iid: Iid) -> Option<&InstanceRecord> {
        self.records.get(&iid)
    }

    pub fn contains(&self, iid: Iid) -> bool {
        self.records.contains_key(&iid)
    }

    pub fn records(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.records.values()
    }

    pub fn children(&self, parent: Iid) -> impl Iterator<Item = &InstanceRecord> {
        self.records.values().filter(move |r| r.parent_iid == Some(parent))
    }

    pub fn set_address(&mut self, iid: Iid, address: impl Into<String>) -> Result<(), FederationError> {
        let r = self
            .records
            .get_mut(&iid)
            .ok_or(FederationError::UnknownInstance(iid))?;
        r.address = address.into();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn issues_sequential_iids_below_the_top_level() {
        let mut d = InstanceDirectory::new("http://top");
        assert_eq!(d.register_instance(TOP_LEVEL_IID, "http://d1").unwrap(), Iid(1));
        assert_eq!(d.register_instance(TOP_LEVEL_IID, "http://d2").unwrap(), Iid(2));
        assert_eq!(d.children(TOP_LEVEL_IID).count(), 2);
        assert!(d.children(TOP_LEVEL_IID).all(|r| r.level == -1));
        assert_eq!(
            d.register_instance(Iid(9), "x"),
            Err(FederationError::UnknownParent(Iid(9)))
        );
        let nested = d.register_instance(Iid(1), "http://office").unwrap();
        assert_eq!(d.get(nested).unwrap().level, -2);
    }
}
