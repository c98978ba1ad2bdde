//! Privacy levels, document ownership, the privacy-permission table and
//! the five renderings derived from them.

mod pseudonym;
mod render;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pseudonym::{mask_value, PseudonymScope, PSEUDONYM_MIN_VALUE_LEN};
pub use render::{
    apply_visibility, display_label, render_document, scan_leaks, AnnotationContext, Counts,
    DocumentRendering, DocumentView, EntityRendering, EntityView, MentionView, RelationshipView,
    SectionRendering, ViewRequest,
};

use crate::ids::Iid;
use crate::metamodel::Metamodel;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AccessError {
    #[error("permission denied")]
    PermissionDenied,
    #[error("pseudonym collision between `{0}` and `{1}`")]
    PseudonymCollision(String, String),
    #[error("cannot read permission tables: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ownership {
    Generic,
    Reader,
    Editor,
    Owner,
}

impl Ownership {
    pub const ALL: [Ownership; 4] = [
        Ownership::Owner,
        Ownership::Editor,
        Ownership::Reader,
        Ownership::Generic,
    ];
}

/// Ordered from least to most permissive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permission {
    Denied,
    CountOnly,
    WithoutMentions,
    ReadAnonymized,
    ReadOnly,
    FullControl,
}

impl Permission {
    pub const ALL: [Permission; 6] = [
        Permission::Denied,
        Permission::CountOnly,
        Permission::WithoutMentions,
        Permission::ReadAnonymized,
        Permission::ReadOnly,
        Permission::FullControl,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityTypePrivacy {
    pub type_name: String,
    pub privacy_level: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnershipEntry {
    pub instance_id: Iid,
    pub user: String,
    pub doc_id: String,
    pub level: Ownership,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionRule {
    pub ownership_level: Ownership,
    pub privacy_level: u8,
    pub permission: Permission,
}

/// `permissions.json`: the three tables of one instance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionTables {
    #[serde(default)]
    pub privacy: Vec<EntityTypePrivacy>,
    #[serde(default)]
    pub ownership: Vec<OwnershipEntry>,
    #[serde(default)]
    pub rules: Vec<PermissionRule>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    /// Highest privacy level.
    pub max_level: u8,
    /// Highest level a reader sees in clear.
    pub reader_threshold: u8,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            max_level: 3,
            reader_threshold: 1,
        }
    }
}

/// The default privacy-permission table for levels `0..=n`.
pub fn default_rules(cfg: PrivacyConfig) -> Vec<PermissionRule> {
    let mut rules = Vec::new();
    for pl in 0..=cfg.max_level {
        let permission = |o: Ownership| match o {
            Ownership::Owner => Permission::FullControl,
            Ownership::Editor if pl < cfg.max_level => Permission::ReadOnly,
            Ownership::Editor => Permission::ReadAnonymized,
            Ownership::Reader if pl <= cfg.reader_threshold => Permission::ReadOnly,
            Ownership::Reader => Permission::ReadAnonymized,
            Ownership::Generic => match pl {
                0 => Permission::ReadOnly,
                1 => Permission::WithoutMentions,
                _ if pl < cfg.max_level => Permission::CountOnly,
                _ => Permission::Denied,
            },
        };
        for o in Ownership::ALL {
            rules.push(PermissionRule {
                ownership_level: o,
                privacy_level: pl,
                permission: permission(o),
            });
        }
    }
    rules
}

impl PermissionTables {
    pub fn from_json(text: &str) -> Result<Self, AccessError> {
        serde_json::from_str(text).map_err(|e| AccessError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, AccessError> {
        let text = std::fs::read_to_string(path).map_err(|e| AccessError::Io(e.to_string()))?;
        Self::from_json(&text)
    }
}

/// Compiled tables of one instance.
#[derive(Clone, Debug)]
pub struct AccessControl {
    iid: Iid,
    privacy: BTreeMap<String, u8>,
    ownership: BTreeMap<(String, String), Ownership>,
    rules: BTreeMap<(Ownership, u8), Permission>,
}

impl AccessControl {
    /// Type privacy falls back to the metamodel when the table omits a type.
    pub fn new(iid: Iid, tables: &PermissionTables, metamodel: &Metamodel) -> Self {
        let mut privacy: BTreeMap<String, u8> = metamodel
            .entity_types()
            .map(|t| (t.name.clone(), t.privacy_level))
            .collect();
        for p in &tables.privacy {
            privacy.insert(p.type_name.clone(), p.privacy_level);
        }
        let ownership = tables
            .ownership
            .iter()
            .filter(|o| o.instance_id == iid)
            .map(|o| ((o.user.clone(), o.doc_id.clone()), o.level))
            .collect();
        let rules = tables
            .rules
            .iter()
            .map(|r| ((r.ownership_level, r.privacy_level), r.permission))
            .collect();
        Self {
            iid,
            privacy,
            ownership,
            rules,
        }
    }

    pub fn iid(&self) -> Iid {
        self.iid
    }

    pub fn privacy_level(&self, type_name: &str) -> u8 {
        self.privacy.get(type_name).copied().unwrap_or(0)
    }

    pub fn ownership(&self, user: &str, doc_id: &str) -> Option<Ownership> {
        self.ownership.get(&(user.to_string(), doc_id.to_string())).copied()
    }

    pub fn set_ownership(&mut self, user: &str, doc_id: &str, level: Ownership) {
        self.ownership.insert((user.to_string(), doc_id.to_string()), level);
    }

    /// Whether the user has any ownership entry at this instance.
    pub fn knows_user(&self, user: &str) -> bool {
        self.ownership.keys().any(|(u, _)| u == user)
    }

    /// Table lookup; missing cells are `Denied`.
    pub fn rule(&self, ownership: Ownership, privacy_level: u8) -> Permission {
        self.rules
            .get(&(ownership, privacy_level))
            .copied()
            .unwrap_or(Permission::Denied)
    }

    pub fn resolve_permission(&self, user: &str, doc_id: &str, type_name: &str) -> Permission {
        match self.ownership(user, doc_id) {
            Some(o) => self.rule(o, self.privacy_level(type_name)),
            None => Permission::Denied,
        }
    }

    pub fn tables(&self) -> PermissionTables {
        PermissionTables {
            privacy: self
                .privacy
                .iter()
                .map(|(t, p)| EntityTypePrivacy {
                    type_name: t.clone(),
                    privacy_level: *p,
                })
                .collect(),
            ownership: self
                .ownership
                .iter()
                .map(|((user, doc), level)| OwnershipEntry {
                    instance_id: self.iid,
                    user: user.clone(),
                    doc_id: doc.clone(),
                    level: *level,
                })
                .collect(),
            rules: self
                .rules
                .iter()
                .map(|((o, pl), p)| PermissionRule {
                    ownership_level: *o,
                    privacy_level: *pl,
                    permission: *p,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests;
