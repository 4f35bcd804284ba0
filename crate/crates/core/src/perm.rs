//! Filesystem permission model with an immutable security mask (smask).
//!
//! Unprivileged sessions have the smask (normally `0o007`) cleared from every
//! mode they create or chmod, so world bits never appear. ACLs hold only
//! named-group entries, and only groups the granting owner belongs to.
//! Homes are owned by root and group-owned by the user's private group.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directory::{Directory, DirectoryError, GroupId, UserId};

pub const SMASK_NORMAL: Mode = Mode(0o007);
pub const SMASK_RELAXED: Mode = Mode(0o002);
pub const HOME_MODE: Mode = Mode(0o770);
pub const SYSTEM_DIR_MODE: Mode = Mode(0o755);

/// Nine permission bits, `rwxrwxrwx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Mode(u16);

impl Mode {
    pub const ALL: u16 = 0o777;
    pub const WORLD: Mode = Mode(0o007);

    pub const fn new(bits: u16) -> Mode {
        Mode(bits & Self::ALL)
    }

    pub const fn bits(self) -> u16 {
        self.0
    }

    pub const fn without(self, mask: Mode) -> Mode {
        Mode(self.0 & !mask.0)
    }

    pub fn owner(self) -> Perms {
        Perms((self.0 >> 6) as u8 & 0o7)
    }

    pub fn group(self) -> Perms {
        Perms((self.0 >> 3) as u8 & 0o7)
    }

    pub fn other(self) -> Perms {
        Perms(self.0 as u8 & 0o7)
    }

    pub fn has_world_bits(self) -> bool {
        self.0 & Self::WORLD.0 != 0
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:03o}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad mode {0:?}; expected three octal digits")]
pub struct BadMode(pub String);

impl FromStr for Mode {
    type Err = BadMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 3 || !s.bytes().all(|b| (b'0'..=b'7').contains(&b)) {
            return Err(BadMode(s.to_owned()));
        }
        Ok(Mode(u16::from_str_radix(s, 8).unwrap()))
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Three permission bits, `rwx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Perms(u8);

impl Perms {
    pub const NONE: Perms = Perms(0);
    pub const R: Perms = Perms(4);
    pub const W: Perms = Perms(2);
    pub const X: Perms = Perms(1);
    pub const RW: Perms = Perms(6);
    pub const WX: Perms = Perms(3);
    pub const RWX: Perms = Perms(7);

    pub const fn new(bits: u8) -> Perms {
        Perms(bits & 0o7)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn union(self, other: Perms) -> Perms {
        Perms(self.0 | other.0)
    }

    pub const fn contains(self, want: Perms) -> bool {
        self.0 & want.0 == want.0
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |bit: u8, c: char| if self.0 & bit != 0 { c } else { '-' };
        write!(f, "{}{}{}", flag(4, 'r'), flag(2, 'w'), flag(1, 'x'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad permission string {0:?}; expected e.g. \"r-x\"")]
pub struct BadPerms(pub String);

impl FromStr for Perms {
    type Err = BadPerms;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        if b.len() != 3 {
            return Err(BadPerms(s.to_owned()));
        }
        let mut bits = 0;
        for (i, (on, bit)) in [(b'r', 4), (b'w', 2), (b'x', 1)].into_iter().enumerate() {
            match b[i] {
                c if c == on => bits |= bit,
                b'-' => {}
                _ => return Err(BadPerms(s.to_owned())),
            }
        }
        Ok(Perms(bits))
    }
}

impl Serialize for Perms {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Perms {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    File,
    Dir,
}

/// Named-group ACL entry. There is no representation for an "other" entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AclEntry {
    pub gid: GroupId,
    pub perms: Perms,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FsNode {
    pub path: String,
    pub kind: NodeKind,
    pub owner: UserId,
    pub group: GroupId,
    pub mode: Mode,
    pub acl: Vec<AclEntry>,
}

impl FsNode {
    /// Permissions `uid` holds on this node alone, ignoring path traversal.
    pub fn granted(&self, uid: UserId, groups: &BTreeSet<GroupId>) -> Perms {
        if uid.is_root() {
            return Perms::RWX;
        }
        if uid == self.owner {
            return self.mode.owner();
        }
        let mut granted = None;
        if groups.contains(&self.group) {
            granted = Some(self.mode.group());
        }
        for e in self.acl.iter().filter(|e| groups.contains(&e.gid)) {
            granted = Some(granted.unwrap_or(Perms::NONE).union(e.perms));
        }
        granted.unwrap_or_else(|| self.mode.other())
    }
}

/// A login session. The smask can only be loosened by [`FileSystem::smask_relax`],
/// which returns a new session.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Session {
    uid: UserId,
    gid: GroupId,
    umask: Mode,
    smask: Mode,
}

impl Session {
    pub fn new(uid: UserId, gid: GroupId, umask: Mode, smask: Mode) -> Self {
        Self { uid, gid, umask, smask }
    }

    pub fn uid(&self) -> UserId {
        self.uid
    }

    pub fn gid(&self) -> GroupId {
        self.gid
    }

    pub fn umask(&self) -> Mode {
        self.umask
    }

    pub fn smask(&self) -> Mode {
        self.smask
    }

    pub fn privileged(&self) -> bool {
        self.uid.is_root()
    }

    /// `newgrp` inside the session.
    pub fn with_group(&self, dir: &Directory, gid: GroupId) -> Result<Session, PermError> {
        if !dir.is_member(self.uid, gid)? {
            return Err(PermError::NotMember { uid: self.uid, gid });
        }
        Ok(Session { gid, ..self.clone() })
    }

    /// The mask applied to requested modes: umask, plus smask when unprivileged.
    fn effective_mask(&self) -> Mode {
        if self.privileged() {
            self.umask
        } else {
            Mode(self.umask.0 | self.smask.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PermError {
    #[error(transparent)]
    Directory(#[from] DirectoryError),
    #[error("no such path {0}")]
    NotFound(String),
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("{0} is not a directory")]
    NotDir(String),
    #[error("{0} already exists")]
    Exists(String),
    #[error("permission denied on {0}")]
    Denied(String),
    #[error("uid {uid} does not own {path}")]
    NotOwner { uid: UserId, path: String },
    #[error("uid {uid} is not a member of gid {gid}")]
    NotMember { uid: UserId, gid: GroupId },
    #[error("uid {0} may not relax the smask")]
    NotWhitelisted(UserId),
}

fn validate_path(path: &str) -> Result<(), PermError> {
    if path == "/" {
        return Ok(());
    }
    let ok = path.starts_with('/')
        && path[1..].split('/').all(valid_name);
    if ok {
        Ok(())
    } else {
        Err(PermError::InvalidPath(path.to_owned()))
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name != "." && name != ".." && !name.contains(['/', '\0'])
}

pub fn join(parent: &str, name: &str) -> String {
    if parent == "/" {
        format!("/{name}")
    } else {
        format!("{parent}/{name}")
    }
}

/// Ancestors of `path`, root first, excluding `path` itself.
fn ancestors(path: &str) -> Vec<&str> {
    let mut out = vec![];
    if path == "/" {
        return out;
    }
    out.push("/");
    for (i, c) in path.char_indices().skip(1) {
        if c == '/' {
            out.push(&path[..i]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FileSystem {
    nodes: BTreeMap<String, FsNode>,
    support: BTreeSet<UserId>,
    smask: Mode,
}

impl Default for FileSystem {
    fn default() -> Self {
        Self::new()
    }
}

impl FileSystem {
    /// An empty tree with a root-owned `/` at mode 755 and the normal smask.
    pub fn new() -> Self {
        let root = FsNode {
            path: "/".into(),
            kind: NodeKind::Dir,
            owner: UserId::ROOT,
            group: GroupId(0),
            mode: SYSTEM_DIR_MODE,
            acl: vec![],
        };
        Self {
            nodes: BTreeMap::from([("/".to_owned(), root)]),
            support: BTreeSet::new(),
            smask: SMASK_NORMAL,
        }
    }

    /// Smask handed to new sessions; `Mode::new(0)` disables enforcement.
    pub fn set_smask_policy(&mut self, smask: Mode) {
        self.smask = smask;
    }

    pub fn smask_policy(&self) -> Mode {
        self.smask
    }

    pub fn add_support_user(&mut self, uid: UserId) {
        self.support.insert(uid);
    }

    pub fn open_session(&self, dir: &Directory, uid: UserId, umask: Mode) -> Result<Session, PermError> {
        let gid = dir.user(uid)?.upg;
        Ok(Session::new(uid, gid, umask, self.smask))
    }

    /// New session with smask 002 for whitelisted support staff; `session` is unchanged.
    pub fn smask_relax(&self, session: &Session) -> Result<Session, PermError> {
        if !self.support.contains(&session.uid) {
            return Err(PermError::NotWhitelisted(session.uid));
        }
        Ok(Session { smask: SMASK_RELAXED, ..session.clone() })
    }

    pub fn node(&self, path: &str) -> Result<&FsNode, PermError> {
        self.nodes.get(path).ok_or_else(|| PermError::NotFound(path.to_owned()))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &FsNode> {
        self.nodes.values()
    }

    pub fn create_node(
        &mut self,
        dir: &Directory,
        session: &Session,
        parent: &str,
        name: &str,
        kind: NodeKind,
        requested: Mode,
    ) -> Result<&FsNode, PermError> {
        if !valid_name(name) {
            return Err(PermError::InvalidName(name.to_owned()));
        }
        let parent_node = self.node(parent)?;
        if parent_node.kind != NodeKind::Dir {
            return Err(PermError::NotDir(parent.to_owned()));
        }
        let groups = dir.effective_groups(session.uid)?;
        if !self.access_checked(session.uid, &groups, parent, Perms::WX)? {
            return Err(PermError::Denied(parent.to_owned()));
        }
        let path = join(parent, name);
        if self.nodes.contains_key(&path) {
            return Err(PermError::Exists(path));
        }
        let node = FsNode {
            path: path.clone(),
            kind,
            owner: session.uid,
            group: session.gid,
            mode: requested.without(session.effective_mask()),
            acl: vec![],
        };
        Ok(self.nodes.entry(path).or_insert(node))
    }

    pub fn chmod(&mut self, session: &Session, path: &str, mode: Mode) -> Result<(), PermError> {
        let node = self
            .nodes
            .get_mut(path)
            .ok_or_else(|| PermError::NotFound(path.to_owned()))?;
        if !session.privileged() && node.owner != session.uid {
            return Err(PermError::NotOwner { uid: session.uid, path: path.to_owned() });
        }
        node.mode = if session.privileged() { mode } else { mode.without(session.smask) };
        Ok(())
    }

    /// Adds or replaces the entry for `gid`. Owners may only name groups they belong to.
    pub fn set_acl(
        &mut self,
        dir: &Directory,
        session: &Session,
        path: &str,
        gid: GroupId,
        perms: Perms,
    ) -> Result<(), PermError> {
        dir.group(gid)?;
        let node = self
            .nodes
            .get_mut(path)
            .ok_or_else(|| PermError::NotFound(path.to_owned()))?;
        if !session.privileged() {
            if node.owner != session.uid {
                return Err(PermError::NotOwner { uid: session.uid, path: path.to_owned() });
            }
            if !dir.is_member(session.uid, gid)? {
                return Err(PermError::NotMember { uid: session.uid, gid });
            }
        }
        match node.acl.iter_mut().find(|e| e.gid == gid) {
            Some(e) => e.perms = perms,
            None => {
                node.acl.push(AclEntry { gid, perms });
                node.acl.sort();
            }
        }
        Ok(())
    }

    /// Whether `uid` with `groups` holds `want` on `path`, including `x` on every ancestor.
    /// Unknown paths are denied.
    pub fn access(&self, uid: UserId, groups: &BTreeSet<GroupId>, path: &str, want: Perms) -> bool {
        self.access_checked(uid, groups, path, want).unwrap_or(false)
    }

    pub fn access_checked(
        &self,
        uid: UserId,
        groups: &BTreeSet<GroupId>,
        path: &str,
        want: Perms,
    ) -> Result<bool, PermError> {
        let node = self.node(path)?;
        for a in ancestors(path) {
            if !self.node(a)?.granted(uid, groups).contains(Perms::X) {
                return Ok(false);
            }
        }
        Ok(node.granted(uid, groups).contains(want))
    }

    /// `/home/<username>` owned by root, group-owned by the user's private group, mode 770.
    /// Creates `/home` (root, 755) if needed.
    pub fn init_home(&mut self, dir: &Directory, uid: UserId) -> Result<&FsNode, PermError> {
        let user = dir.user(uid)?;
        if !self.nodes.contains_key("/home") {
            self.insert_node(FsNode {
                path: "/home".into(),
                kind: NodeKind::Dir,
                owner: UserId::ROOT,
                group: GroupId(0),
                mode: SYSTEM_DIR_MODE,
                acl: vec![],
            })?;
        }
        let path = join("/home", &user.username);
        let upg = user.upg;
        self.insert_node(FsNode {
            path: path.clone(),
            kind: NodeKind::Dir,
            owner: UserId::ROOT,
            group: upg,
            mode: HOME_MODE,
            acl: vec![],
        })?;
        Ok(&self.nodes[&path])
    }

    /// Places a node verbatim, bypassing session checks. Used for fixtures.
    pub fn insert_node(&mut self, node: FsNode) -> Result<(), PermError> {
        validate_path(&node.path)?;
        if self.nodes.contains_key(&node.path) {
            return Err(PermError::Exists(node.path));
        }
        let parent = ancestors(&node.path).pop().unwrap_or("/");
        match self.nodes.get(parent) {
            Some(p) if p.kind == NodeKind::Dir => {}
            Some(_) => return Err(PermError::NotDir(parent.to_owned())),
            None => return Err(PermError::NotFound(parent.to_owned())),
        }
        self.nodes.insert(node.path.clone(), node);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directory::GroupKind;

    struct Fx {
        dir: Directory,
        fs: FileSystem,
        alice: UserId,
        bob: UserId,
        carol: UserId,
        proj1: GroupId,
        proj2: GroupId,
    }

    fn fx() -> Fx {
        let mut dir = Directory::new();
        dir.create_user_with_uid("root", UserId::ROOT).unwrap();
        let alice = dir.create_user("alice").unwrap().uid;
        let bob = dir.create_user("bob").unwrap().uid;
        let carol = dir.create_user("carol").unwrap().uid;
        let proj1 = dir.create_group("proj1", GroupKind::Project).unwrap().gid;
        let proj2 = dir.create_group("proj2", GroupKind::Project).unwrap().gid;
        dir.add_member(proj1, alice).unwrap();
        dir.add_member(proj1, bob).unwrap();
        let mut fs = FileSystem::new();
        fs.add_support_user(carol);
        for u in [alice, bob, carol] {
            fs.init_home(&dir, u).unwrap();
        }
        Fx { dir, fs, alice, bob, carol, proj1, proj2 }
    }

    fn session(f: &Fx, uid: UserId, umask: u16) -> Session {
        f.fs.open_session(&f.dir, uid, Mode::new(umask)).unwrap()
    }

    fn groups(f: &Fx, uid: UserId) -> BTreeSet<GroupId> {
        f.dir.effective_groups(uid).unwrap()
    }

    #[test]
    fn parse_and_format() {
        assert_eq!("640".parse::<Mode>().unwrap(), Mode::new(0o640));
        assert_eq!(Mode::new(0o7).to_string(), "007");
        for bad in ["64", "6400", "648", "rwx", ""] {
            assert!(bad.parse::<Mode>().is_err(), "{bad}");
        }
        assert_eq!("r-x".parse::<Perms>().unwrap(), Perms::new(5));
        assert_eq!(Perms::RW.to_string(), "rw-");
        assert!("xwr".parse::<Perms>().is_err());
        assert!("rw".parse::<Perms>().is_err());
    }

    #[test]
    fn create_applies_masks() {
        let mut f = fx();
        let s = session(&f, f.alice, 0o022);
        let n = f.fs.create_node(&f.dir, &s, "/home/alice", "a", NodeKind::File, Mode::new(0o666)).unwrap();
        assert_eq!(n.mode, Mode::new(0o640));
        assert_eq!((n.owner, n.group), (f.alice, GroupId(f.alice.0)));
        let n = f.fs.create_node(&f.dir, &s, "/home/alice", "z", NodeKind::File, Mode::new(0)).unwrap();
        assert_eq!(n.mode, Mode::new(0));
        let r = session(&f, UserId::ROOT, 0o022);
        let n = f.fs.create_node(&f.dir, &r, "/", "srv", NodeKind::Dir, Mode::new(0o666)).unwrap();
        assert_eq!(n.mode, Mode::new(0o644));
    }

    #[test]
    fn create_errors() {
        let mut f = fx();
        let s = session(&f, f.bob, 0o022);
        let err = f.fs.create_node(&f.dir, &s, "/home/alice", "x", NodeKind::File, Mode::new(0o600));
        assert_eq!(err.unwrap_err(), PermError::Denied("/home/alice".into()));
        f.fs.create_node(&f.dir, &s, "/home/bob", "x", NodeKind::File, Mode::new(0o600)).unwrap();
        let err = f.fs.create_node(&f.dir, &s, "/home/bob", "x", NodeKind::File, Mode::new(0o600));
        assert_eq!(err.unwrap_err(), PermError::Exists("/home/bob/x".into()));
        let err = f.fs.create_node(&f.dir, &s, "/home/bob/x", "y", NodeKind::File, Mode::new(0o600));
        assert_eq!(err.unwrap_err(), PermError::NotDir("/home/bob/x".into()));
        let err = f.fs.create_node(&f.dir, &s, "/nope", "y", NodeKind::File, Mode::new(0o600));
        assert_eq!(err.unwrap_err(), PermError::NotFound("/nope".into()));
        let err = f.fs.create_node(&f.dir, &s, "/home/bob", "..", NodeKind::File, Mode::new(0o600));
        assert!(matches!(err, Err(PermError::InvalidName(_))));
    }

    #[test]
    fn newgrp_session_sets_group() {
        let mut f = fx();
        let s = session(&f, f.alice, 0o022).with_group(&f.dir, f.proj1).unwrap();
        let n = f.fs.create_node(&f.dir, &s, "/home/alice", "shared", NodeKind::File, Mode::new(0o660)).unwrap();
        assert_eq!(n.group, f.proj1);
        assert!(session(&f, f.carol, 0).with_group(&f.dir, f.proj1).is_err());
    }

    #[test]
    fn chmod_rules() {
        let mut f = fx();
        let s = session(&f, f.alice, 0o077);
        f.fs.create_node(&f.dir, &s, "/home/alice", "a", NodeKind::File, Mode::new(0o600)).unwrap();
        f.fs.chmod(&s, "/home/alice/a", Mode::new(0o666)).unwrap();
        assert_eq!(f.fs.node("/home/alice/a").unwrap().mode, Mode::new(0o660));
        f.fs.chmod(&s, "/home/alice/a", Mode::new(0o666)).unwrap();
        assert_eq!(f.fs.node("/home/alice/a").unwrap().mode, Mode::new(0o660));
        let b = session(&f, f.bob, 0);
        assert!(matches!(f.fs.chmod(&b, "/home/alice/a", Mode::new(0o600)), Err(PermError::NotOwner { .. })));
        assert!(matches!(f.fs.chmod(&s, "/home/alice", Mode::new(0o777)), Err(PermError::NotOwner { .. })));
        assert!(matches!(f.fs.chmod(&s, "/home/alice/zz", Mode::new(0o777)), Err(PermError::NotFound(_))));
        let r = session(&f, UserId::ROOT, 0);
        f.fs.chmod(&r, "/home/alice/a", Mode::new(0o777)).unwrap();
        assert_eq!(f.fs.node("/home/alice/a").unwrap().mode, Mode::new(0o777));
    }

    #[test]
    fn acl_grants_need_membership() {
        let mut f = fx();
        let s = session(&f, f.alice, 0o077);
        f.fs.create_node(&f.dir, &s, "/home/alice", "a", NodeKind::File, Mode::new(0o600)).unwrap();
        f.fs.set_acl(&f.dir, &s, "/home/alice/a", f.proj1, Perms::R).unwrap();
        assert_eq!(f.fs.node("/home/alice/a").unwrap().acl, vec![AclEntry { gid: f.proj1, perms: Perms::R }]);
        assert_eq!(
            f.fs.set_acl(&f.dir, &s, "/home/alice/a", f.proj2, Perms::R),
            Err(PermError::NotMember { uid: f.alice, gid: f.proj2 })
        );
        f.fs.set_acl(&f.dir, &s, "/home/alice/a", GroupId(f.alice.0), Perms::RW).unwrap();
        f.fs.set_acl(&f.dir, &s, "/home/alice/a", f.proj1, Perms::RW).unwrap();
        assert_eq!(f.fs.node("/home/alice/a").unwrap().acl.len(), 2);
        let b = session(&f, f.bob, 0);
        assert!(matches!(f.fs.set_acl(&f.dir, &b, "/home/alice/a", f.proj1, Perms::R), Err(PermError::NotOwner { .. })));
        assert!(f.fs.set_acl(&f.dir, &s, "/home/alice/a", GroupId(31337), Perms::R).is_err());
    }

    #[test]
    fn access_resolution() {
        let mut f = fx();
        let s = session(&f, f.alice, 0o077);
        f.fs.create_node(&f.dir, &s, "/home/alice", "own", NodeKind::File, Mode::new(0o600)).unwrap();
        assert!(f.fs.access(f.alice, &groups(&f, f.alice), "/home/alice/own", Perms::R));

        let s = session(&f, f.alice, 0);
        f.fs.create_node(&f.dir, &s, "/home/alice", "g", NodeKind::File, Mode::new(0o660)).unwrap();
        assert!(!f.fs.access(f.bob, &groups(&f, f.bob), "/home/alice/g", Perms::R));
        assert!(!f.fs.access(f.bob, &groups(&f, f.bob), "/home/alice", Perms::R));

        // Shared directory for proj1 so traversal is possible.
        let r = session(&f, UserId::ROOT, 0);
        f.fs.create_node(&f.dir, &r, "/", "proj", NodeKind::Dir, Mode::new(0o770)).unwrap();
        let mut n = f.fs.node("/proj").unwrap().clone();
        f.fs.nodes.remove("/proj");
        n.group = f.proj1;
        f.fs.insert_node(n).unwrap();
        let s = session(&f, f.alice, 0o077).with_group(&f.dir, f.proj1).unwrap();
        f.fs.create_node(&f.dir, &s, "/proj", "acl", NodeKind::File, Mode::new(0o600)).unwrap();
        assert!(!f.fs.access(f.bob, &groups(&f, f.bob), "/proj/acl", Perms::R));
        f.fs.set_acl(&f.dir, &s, "/proj/acl", f.proj1, Perms::R).unwrap();
        assert!(f.fs.access(f.bob, &groups(&f, f.bob), "/proj/acl", Perms::R));
        assert!(!f.fs.access(f.bob, &groups(&f, f.bob), "/proj/acl", Perms::W));
        assert!(!f.fs.access(f.carol, &groups(&f, f.carol), "/proj/acl", Perms::R));
        assert!(!f.fs.access(f.bob, &groups(&f, f.bob), "/proj/missing", Perms::R));
        assert!(f.fs.access_checked(f.bob, &groups(&f, f.bob), "/proj/missing", Perms::R).is_err());
    }

    #[test]
    fn acl_evaluation_matches_class_table() {
        // Exhaustive over mode bits, ACL perms and requester class for one node.
        let proj = GroupId(20000);
        let owner = UserId(1000);
        for mode in 0..=0o777u16 {
            for acl_bits in 0..8u8 {
                let node = FsNode {
                    path: "/f".into(),
                    kind: NodeKind::File,
                    owner,
                    group: GroupId(1000),
                    mode: Mode::new(mode),
                    acl: vec![AclEntry { gid: proj, perms: Perms::new(acl_bits) }],
                };
                let owner_bits = (mode >> 6) as u8;
                let group_bits = (mode >> 3) as u8 & 7;
                let other_bits = mode as u8 & 7;
                let cases: [(UserId, BTreeSet<GroupId>, u8); 4] = [
                    (owner, BTreeSet::from([GroupId(1000)]), owner_bits),
                    (UserId(1001), BTreeSet::from([GroupId(1001), proj]), acl_bits),
                    (UserId(1002), BTreeSet::from([GroupId(1002), GroupId(1000), proj]), acl_bits | group_bits),
                    (UserId(1003), BTreeSet::from([GroupId(1003)]), other_bits),
                ];
                for (uid, groups, expect) in cases {
                    assert_eq!(node.granted(uid, &groups).bits(), expect, "mode {mode:o} acl {acl_bits}");
                }
            }
        }
    }

    #[test]
    fn smask_relax_flow() {
        let mut f = fx();
        let c = session(&f, f.carol, 0o022);
        let relaxed = f.fs.smask_relax(&c).unwrap();
        assert_eq!(relaxed.smask(), SMASK_RELAXED);
        assert_eq!(c.smask(), SMASK_NORMAL);
        let n = f.fs.create_node(&f.dir, &relaxed, "/home/carol", "pub", NodeKind::File, Mode::new(0o644)).unwrap();
        assert_eq!(n.mode, Mode::new(0o644));
        let n = f.fs.create_node(&f.dir, &relaxed, "/home/carol", "w", NodeKind::File, Mode::new(0o666)).unwrap();
        assert_eq!(n.mode, Mode::new(0o644));
        let a = session(&f, f.alice, 0o022);
        assert_eq!(f.fs.smask_relax(&a), Err(PermError::NotWhitelisted(f.alice)));
    }

    #[test]
    fn home_layout() {
        let mut f = fx();
        let home = f.fs.node("/home/alice").unwrap();
        assert_eq!((home.owner, home.group, home.mode), (UserId::ROOT, GroupId(f.alice.0), HOME_MODE));
        assert!(matches!(f.fs.init_home(&f.dir, f.alice), Err(PermError::Exists(_))));
        assert!(!f.fs.access(f.bob, &groups(&f, f.bob), "/home/alice", Perms::R));
        assert!(f.fs.access(f.alice, &groups(&f, f.alice), "/home/alice", Perms::RWX));
    }

    #[test]
    fn insert_node_validation() {
        let mut f = fx();
        let node = |path: &str| FsNode {
            path: path.into(),
            kind: NodeKind::File,
            owner: UserId::ROOT,
            group: GroupId(0),
            mode: Mode::new(0o644),
            acl: vec![],
        };
        assert!(matches!(f.fs.insert_node(node("relative")), Err(PermError::InvalidPath(_))));
        assert!(matches!(f.fs.insert_node(node("/a//b")), Err(PermError::InvalidPath(_))));
        assert!(matches!(f.fs.insert_node(node("/x/y")), Err(PermError::NotFound(_))));
        f.fs.insert_node(node("/x")).unwrap();
        assert!(matches!(f.fs.insert_node(node("/x/y")), Err(PermError::NotDir(_))));
    }
}
