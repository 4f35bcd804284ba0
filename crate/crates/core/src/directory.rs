//! Registry of users, groups and group membership.
//!
//! Every user owns a user private group (UPG) whose only member is that user
//! and whose gid equals the uid. Project groups are allocated from
//! [`PROJECT_GID_BASE`]; the single process-visibility exempt group always
//! lives at [`EXEMPT_GID`]. Membership changes only through this module.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FIRST_REGULAR_UID: u32 = 1000;
pub const PROJECT_GID_BASE: u32 = 20000;
pub const EXEMPT_GID: u32 = 999;
pub const MAX_USERNAME_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl UserId {
    pub const ROOT: UserId = UserId(0);

    pub fn is_root(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u32);

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Upg,
    Project,
    Exempt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct User {
    pub uid: UserId,
    pub username: String,
    pub upg: GroupId,
    pub supplemental: BTreeSet<GroupId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub gid: GroupId,
    pub name: String,
    pub members: BTreeSet<UserId>,
    pub kind: GroupKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DirectoryError {
    #[error("invalid username {0:?}")]
    InvalidName(String),
    #[error("username {0:?} already exists")]
    DuplicateUsername(String),
    #[error("group name {0:?} already exists")]
    DuplicateGroupName(String),
    #[error("uid {0} already exists")]
    DuplicateUid(UserId),
    #[error("gid {0} already exists")]
    DuplicateGid(GroupId),
    #[error("unknown uid {0}")]
    UnknownUser(UserId),
    #[error("unknown gid {0}")]
    UnknownGroup(GroupId),
    #[error("unknown user {0:?}")]
    UnknownUsername(String),
    #[error("unknown group {0:?}")]
    UnknownGroupName(String),
    #[error("group {0} is a user private group and cannot change membership")]
    UpgImmutable(GroupId),
    #[error("user private groups are created together with their user")]
    UpgCreation,
    #[error("gid {gid} is outside the range reserved for {kind:?} groups")]
    GidOutOfRange { gid: GroupId, kind: GroupKind },
}

/// Checks the `[a-z_][a-z0-9_-]{0,31}` name grammar shared with the ident wire format.
pub fn is_valid_name(name: &str) -> bool {
    let bytes = name.as_bytes();
    match bytes.first() {
        Some(b) if b.is_ascii_lowercase() || *b == b'_' => {}
        _ => return false,
    }
    bytes.len() <= MAX_USERNAME_LEN
        && bytes[1..]
            .iter()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'_' || *b == b'-')
}

#[derive(Debug, Clone, Default)]
pub struct Directory {
    users: BTreeMap<UserId, User>,
    groups: BTreeMap<GroupId, Group>,
    user_names: BTreeMap<String, UserId>,
    group_names: BTreeMap<String, GroupId>,
}

impl Directory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a user with the next free regular uid and its private group.
    pub fn create_user(&mut self, username: &str) -> Result<&User, DirectoryError> {
        let mut uid = self
            .users
            .keys()
            .next_back()
            .map_or(FIRST_REGULAR_UID, |u| (u.0 + 1).max(FIRST_REGULAR_UID));
        // A UPG gid must not collide with an existing group.
        while self.groups.contains_key(&GroupId(uid)) || self.users.contains_key(&UserId(uid)) {
            uid += 1;
        }
        self.create_user_with_uid(username, UserId(uid))
    }

    /// Creates a user at an explicit uid. uid 0 yields root, whose private
    /// group is gid 0 and carries no special meaning here.
    pub fn create_user_with_uid(
        &mut self,
        username: &str,
        uid: UserId,
    ) -> Result<&User, DirectoryError> {
        if !is_valid_name(username) {
            return Err(DirectoryError::InvalidName(username.to_owned()));
        }
        if self.user_names.contains_key(username) {
            return Err(DirectoryError::DuplicateUsername(username.to_owned()));
        }
        if self.group_names.contains_key(username) {
            return Err(DirectoryError::DuplicateGroupName(username.to_owned()));
        }
        if self.users.contains_key(&uid) {
            return Err(DirectoryError::DuplicateUid(uid));
        }
        let upg = GroupId(uid.0);
        if self.groups.contains_key(&upg) {
            return Err(DirectoryError::DuplicateGid(upg));
        }
        self.groups.insert(
            upg,
            Group {
                gid: upg,
                name: username.to_owned(),
                members: BTreeSet::from([uid]),
                kind: GroupKind::Upg,
            },
        );
        self.group_names.insert(username.to_owned(), upg);
        self.user_names.insert(username.to_owned(), uid);
        self.users.insert(
            uid,
            User {
                uid,
                username: username.to_owned(),
                upg,
                supplemental: BTreeSet::new(),
            },
        );
        Ok(&self.users[&uid])
    }

    /// Creates a project group (next gid from 20000) or the exempt group (gid 999).
    pub fn create_group(&mut self, name: &str, kind: GroupKind) -> Result<&Group, DirectoryError> {
        let gid = match kind {
            GroupKind::Upg => return Err(DirectoryError::UpgCreation),
            GroupKind::Exempt => GroupId(EXEMPT_GID),
            GroupKind::Project => {
                let next = self
                    .groups
                    .range(GroupId(PROJECT_GID_BASE)..)
                    .next_back()
                    .map_or(PROJECT_GID_BASE, |(g, _)| g.0 + 1);
                GroupId(next)
            }
        };
        self.create_group_with_gid(name, kind, gid)
    }

    pub fn create_group_with_gid(
        &mut self,
        name: &str,
        kind: GroupKind,
        gid: GroupId,
    ) -> Result<&Group, DirectoryError> {
        match kind {
            GroupKind::Upg => return Err(DirectoryError::UpgCreation),
            GroupKind::Exempt if gid.0 != EXEMPT_GID => {
                return Err(DirectoryError::GidOutOfRange { gid, kind })
            }
            GroupKind::Project if gid.0 < PROJECT_GID_BASE => {
                return Err(DirectoryError::GidOutOfRange { gid, kind })
            }
            _ => {}
        }
        if !is_valid_name(name) {
            return Err(DirectoryError::InvalidName(name.to_owned()));
        }
        if self.group_names.contains_key(name) {
            return Err(DirectoryError::DuplicateGroupName(name.to_owned()));
        }
        if self.groups.contains_key(&gid) {
            return Err(DirectoryError::DuplicateGid(gid));
        }
        self.groups.insert(
            gid,
            Group {
                gid,
                name: name.to_owned(),
                members: BTreeSet::new(),
                kind,
            },
        );
        self.group_names.insert(name.to_owned(), gid);
        Ok(&self.groups[&gid])
    }

    pub fn add_member(&mut self, gid: GroupId, uid: UserId) -> Result<(), DirectoryError> {
        self.check_mutable(gid, uid)?;
        self.groups.get_mut(&gid).unwrap().members.insert(uid);
        self.users.get_mut(&uid).unwrap().supplemental.insert(gid);
        Ok(())
    }

    pub fn remove_member(&mut self, gid: GroupId, uid: UserId) -> Result<(), DirectoryError> {
        self.check_mutable(gid, uid)?;
        self.groups.get_mut(&gid).unwrap().members.remove(&uid);
        self.users.get_mut(&uid).unwrap().supplemental.remove(&gid);
        Ok(())
    }

    fn check_mutable(&self, gid: GroupId, uid: UserId) -> Result<(), DirectoryError> {
        let group = self.group(gid)?;
        self.user(uid)?;
        if group.kind == GroupKind::Upg {
            return Err(DirectoryError::UpgImmutable(gid));
        }
        Ok(())
    }

    pub fn is_member(&self, uid: UserId, gid: GroupId) -> Result<bool, DirectoryError> {
        let user = self.user(uid)?;
        let group = self.group(gid)?;
        Ok(user.upg == gid || group.members.contains(&uid))
    }

    /// The user's private group plus every supplemental group.
    pub fn effective_groups(&self, uid: UserId) -> Result<BTreeSet<GroupId>, DirectoryError> {
        let user = self.user(uid)?;
        let mut groups = user.supplemental.clone();
        groups.insert(user.upg);
        Ok(groups)
    }

    pub fn user(&self, uid: UserId) -> Result<&User, DirectoryError> {
        self.users.get(&uid).ok_or(DirectoryError::UnknownUser(uid))
    }

    pub fn group(&self, gid: GroupId) -> Result<&Group, DirectoryError> {
        self.groups.get(&gid).ok_or(DirectoryError::UnknownGroup(gid))
    }

    pub fn user_by_name(&self, name: &str) -> Result<&User, DirectoryError> {
        self.user_names
            .get(name)
            .map(|uid| &self.users[uid])
            .ok_or_else(|| DirectoryError::UnknownUsername(name.to_owned()))
    }

    pub fn group_by_name(&self, name: &str) -> Result<&Group, DirectoryError> {
        self.group_names
            .get(name)
            .map(|gid| &self.groups[gid])
            .ok_or_else(|| DirectoryError::UnknownGroupName(name.to_owned()))
    }

    pub fn users(&self) -> impl Iterator<Item = &User> {
        self.users.values()
    }

    pub fn groups(&self) -> impl Iterator<Item = &Group> {
        self.groups.values()
    }

    /// Project groups that contain both users.
    pub fn shared_project_groups(&self, a: UserId, b: UserId) -> BTreeSet<GroupId> {
        self.groups
            .values()
            .filter(|g| g.kind == GroupKind::Project)
            .filter(|g| g.members.contains(&a) && g.members.contains(&b))
            .map(|g| g.gid)
            .collect()
    }
}
